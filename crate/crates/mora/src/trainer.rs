//! Model assembly, per-task optimization, and the continual benchmark loop.
//!
//! The model is a stack of adapted linear layers with tanh between them and a
//! class-incremental head on top. The trunk's base weights come from a
//! pretraining phase and are never updated afterwards; every task trains only
//! its freshly grown capacity (adapter units, its head block, and in router
//! modes the router columns, which stay trainable across tasks).
//!
//! Determinism contract: a run is a pure function of (config, seed). Batches
//! cycle a materialized split, growth noise comes from per-task seed streams,
//! gradients accumulate in pool order, and each task starts from a fresh
//! optimizer. Resuming from a checkpoint therefore reproduces the remaining
//! tasks bit for bit.

use crate::adapter::{adapter_backward, adapter_forward, AdaptedLinear, AdapterGrads};
use crate::baselines::{
    moe_lora_backward, moe_lora_forward, rank_router_backward, rank_router_forward, GrowthPolicy,
    RouterParams, RouterTrace,
};
use crate::config::{OptimConfig, RunConfig};
use crate::gate::{GateMode, GateTrace};
use crate::numerics::{stable_softmax, DenseMatrix, DenseVector};
use crate::taskgen::{
    derive_seed, make_stream, rng_for, test_split, train_split, StreamConfig, TaskSpec, TaskStream,
    TAG_GROW, TAG_INIT, TAG_PRETRAIN,
};
use crate::{MoraError, Result};

use rand::Rng;
use rand_distr::StandardNormal;

/// Samples in the materialized pretraining pool.
const PRETRAIN_POOL: usize = 2048;

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// One output block of the class-incremental head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadBlock {
    /// classes_per_block x hidden_dim readout, zero-initialized.
    pub weight: DenseMatrix,
    pub task_id: usize,
    pub frozen: bool,
}

/// Readout that gains one block per task. Blocks follow the same freeze rule
/// as adapter pools: trainable during their own task, frozen afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct GrowingHead {
    pub hidden_dim: usize,
    pub classes_per_block: usize,
    pub blocks: Vec<HeadBlock>,
}

impl GrowingHead {
    pub fn new(hidden_dim: usize, classes_per_block: usize) -> Self {
        Self {
            hidden_dim,
            classes_per_block,
            blocks: Vec::new(),
        }
    }

    pub fn block_for(&self, task_id: usize) -> Option<&HeadBlock> {
        self.blocks.iter().find(|b| b.task_id == task_id)
    }

    pub fn grow(&mut self, task_id: usize) -> Result<()> {
        if let Some(last) = self.blocks.iter().map(|b| b.task_id).max() {
            if task_id <= last {
                return Err(MoraError::NonMonotonicTask {
                    last,
                    requested: task_id,
                });
            }
        }
        for b in &mut self.blocks {
            b.frozen = true;
        }
        self.blocks.push(HeadBlock {
            weight: DenseMatrix::zeros(self.classes_per_block, self.hidden_dim),
            task_id,
            frozen: false,
        });
        Ok(())
    }
}

/// Per-layer record of one forward pass.
#[derive(Debug, Clone)]
pub enum LayerTrace {
    Gate(GateTrace),
    Router(RouterTrace),
}

impl LayerTrace {
    /// Mixing weight applied to each unit, regardless of how it was produced.
    pub fn unit_weights(&self) -> &[f64] {
        match self {
            LayerTrace::Gate(t) => &t.final_w,
            LayerTrace::Router(t) => &t.unit_w,
        }
    }
}

/// Forward pass record: inputs to every trunk layer plus the final features
/// (`layer_inputs[L]`), and the per-layer mixing traces.
#[derive(Debug, Clone)]
pub struct ForwardRecord {
    pub layer_inputs: Vec<DenseVector>,
    pub traces: Vec<LayerTrace>,
}

impl ForwardRecord {
    pub fn features(&self) -> &DenseVector {
        self.layer_inputs.last().unwrap()
    }
}

/// Adapted trunk, optional per-layer routers, and the growing head.
#[derive(Debug, Clone)]
pub struct ToyModel {
    pub trunk: Vec<AdaptedLinear>,
    pub routers: Vec<Option<RouterParams>>,
    pub head: GrowingHead,
}

impl ToyModel {
    pub fn num_layers(&self) -> usize {
        self.trunk.len()
    }

    fn layer_forward(&self, l: usize, x: &DenseVector) -> Result<(DenseVector, LayerTrace)> {
        let layer = &self.trunk[l];
        match layer.cfg.mode {
            GateMode::RouterLora | GateMode::RouterRank => {
                let router = self.routers[l]
                    .as_ref()
                    .ok_or(MoraError::MissingRouter(layer.cfg.mode))?;
                let (y, trace) = if layer.cfg.mode == GateMode::RouterLora {
                    moe_lora_forward(layer, router, x)?
                } else {
                    rank_router_forward(layer, router, x)?
                };
                Ok((y, LayerTrace::Router(trace)))
            }
            _ => {
                let (y, trace) = adapter_forward(layer, x)?;
                Ok((y, LayerTrace::Gate(trace)))
            }
        }
    }

    pub fn forward(&self, x: &DenseVector) -> Result<ForwardRecord> {
        let mut layer_inputs = Vec::with_capacity(self.num_layers() + 1);
        let mut traces = Vec::with_capacity(self.num_layers());
        let mut h = x.clone();
        for l in 0..self.num_layers() {
            let (z, trace) = self.layer_forward(l, &h)?;
            traces.push(trace);
            layer_inputs.push(h);
            h = DenseVector::new(z.data.iter().map(|v| v.tanh()).collect());
        }
        layer_inputs.push(h);
        Ok(ForwardRecord {
            layer_inputs,
            traces,
        })
    }

    /// Logits restricted to one task's head block. A block that has not been
    /// grown yet reads out all zeros.
    pub fn logits_for_task(&self, features: &DenseVector, task_id: usize) -> Result<DenseVector> {
        match self.head.block_for(task_id) {
            Some(block) => block.weight.matvec(features),
            None => Ok(DenseVector::zeros(self.head.classes_per_block)),
        }
    }
}

/// Assembles a model around pretrained trunk weights. Pools start empty;
/// routers appear on first growth in router modes.
pub fn build_model(cfg: &RunConfig, trunk_w0s: Vec<DenseMatrix>) -> Result<ToyModel> {
    if trunk_w0s.len() != cfg.model.trunk_layers {
        return Err(MoraError::DimensionMismatch {
            context: "trunk weights vs trunk_layers",
            expected: cfg.model.trunk_layers,
            got: trunk_w0s.len(),
        });
    }
    for (l, w) in trunk_w0s.iter().enumerate() {
        let want_in = if l == 0 {
            cfg.stream.input_dim
        } else {
            cfg.model.hidden_dim
        };
        if w.rows != cfg.model.hidden_dim || w.cols != want_in {
            return Err(MoraError::InvalidConfig(format!(
                "trunk layer {l} has shape {}x{}, expected {}x{}",
                w.rows, w.cols, cfg.model.hidden_dim, want_in
            )));
        }
    }
    let gate_cfg = cfg.gate_config();
    let trunk: Vec<AdaptedLinear> = trunk_w0s
        .into_iter()
        .map(|w0| AdaptedLinear::new(w0, gate_cfg))
        .collect();
    let routers = vec![None; trunk.len()];
    Ok(ToyModel {
        trunk,
        routers,
        head: GrowingHead::new(cfg.model.hidden_dim, cfg.stream.classes_per_task),
    })
}

// ---------------------------------------------------------------------------
// Loss and optimizer
// ---------------------------------------------------------------------------

/// Cross entropy over raw logits. Returns the loss and dL/dlogits
/// (`softmax - onehot`).
pub fn cross_entropy(logits: &DenseVector, label: usize) -> Result<(f64, DenseVector)> {
    if label >= logits.len() {
        return Err(MoraError::DimensionMismatch {
            context: "cross_entropy label",
            expected: logits.len(),
            got: label,
        });
    }
    let mut p = stable_softmax(&logits.data)?;
    let loss = -p[label].max(f64::MIN_POSITIVE).ln();
    p[label] -= 1.0;
    Ok((loss, DenseVector::new(p)))
}

/// First and second moment buffers for one parameter group.
#[derive(Debug, Clone)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One AdamW update with bias correction and decoupled weight decay.
/// `step` is 1-based.
pub fn adamw_step(
    param: &mut [f64],
    grad: &[f64],
    mom: &mut Moments,
    step: u64,
    cfg: &OptimConfig,
) {
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for i in 0..param.len() {
        let g = grad[i];
        mom.m[i] = cfg.beta1 * mom.m[i] + (1.0 - cfg.beta1) * g;
        mom.v[i] = cfg.beta2 * mom.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = mom.m[i] / bc1;
        let v_hat = mom.v[i] / bc2;
        param[i] -= cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * param[i]);
    }
}

/// Gradient accumulator laid out over the trainable parameters of one task:
/// non-frozen units per layer, router matrices, and the current head block.
struct GradBuffer {
    unit_index: Vec<Vec<usize>>,
    unit_key: Vec<Vec<DenseVector>>,
    unit_value: Vec<Vec<DenseVector>>,
    router: Vec<Option<DenseMatrix>>,
    head: DenseMatrix,
    head_block: usize,
}

impl GradBuffer {
    fn new(model: &ToyModel) -> Result<Self> {
        let mut unit_index = Vec::new();
        let mut unit_key = Vec::new();
        let mut unit_value = Vec::new();
        let mut router = Vec::new();
        for (l, layer) in model.trunk.iter().enumerate() {
            let idx: Vec<usize> = layer
                .pool
                .units
                .iter()
                .enumerate()
                .filter(|(_, u)| !u.frozen)
                .map(|(i, _)| i)
                .collect();
            unit_key.push(idx.iter().map(|_| DenseVector::zeros(layer.d_in())).collect());
            unit_value.push(idx.iter().map(|_| DenseVector::zeros(layer.d_out())).collect());
            unit_index.push(idx);
            router.push(
                model.routers[l]
                    .as_ref()
                    .map(|r| DenseMatrix::zeros(r.w_r.rows, r.w_r.cols)),
            );
        }
        let head_block = model
            .head
            .blocks
            .iter()
            .position(|b| !b.frozen)
            .ok_or_else(|| {
                MoraError::InvalidConfig("no trainable head block; grow before training".into())
            })?;
        let hb = &model.head.blocks[head_block];
        Ok(Self {
            unit_index,
            unit_key,
            unit_value,
            router,
            head: DenseMatrix::zeros(hb.weight.rows, hb.weight.cols),
            head_block,
        })
    }

    fn zero(&mut self) {
        for layer in self.unit_key.iter_mut().chain(self.unit_value.iter_mut()) {
            for v in layer {
                v.data.iter_mut().for_each(|x| *x = 0.0);
            }
        }
        for r in self.router.iter_mut().flatten() {
            r.data.iter_mut().for_each(|x| *x = 0.0);
        }
        self.head.data.iter_mut().for_each(|x| *x = 0.0);
    }

    fn scale(&mut self, s: f64) {
        for layer in self.unit_key.iter_mut().chain(self.unit_value.iter_mut()) {
            for v in layer {
                v.data.iter_mut().for_each(|x| *x *= s);
            }
        }
        for r in self.router.iter_mut().flatten() {
            r.data.iter_mut().for_each(|x| *x *= s);
        }
        self.head.data.iter_mut().for_each(|x| *x *= s);
    }

    fn add_units(&mut self, l: usize, grads: &AdapterGrads) -> Result<()> {
        if grads.units.len() != self.unit_index[l].len() {
            return Err(MoraError::DimensionMismatch {
                context: "trainable units vs grad buffer",
                expected: self.unit_index[l].len(),
                got: grads.units.len(),
            });
        }
        for (slot, ug) in grads.units.iter().enumerate() {
            debug_assert_eq!(ug.index, self.unit_index[l][slot]);
            self.unit_key[l][slot].axpy(1.0, &ug.d_key_a)?;
            self.unit_value[l][slot].axpy(1.0, &ug.d_value_b)?;
        }
        Ok(())
    }
}

struct OptimState {
    step: u64,
    unit_key: Vec<Vec<Moments>>,
    unit_value: Vec<Vec<Moments>>,
    router: Vec<Option<Moments>>,
    head: Moments,
}

impl OptimState {
    fn new(buf: &GradBuffer) -> Self {
        Self {
            step: 0,
            unit_key: buf
                .unit_key
                .iter()
                .map(|l| l.iter().map(|v| Moments::zeros(v.len())).collect())
                .collect(),
            unit_value: buf
                .unit_value
                .iter()
                .map(|l| l.iter().map(|v| Moments::zeros(v.len())).collect())
                .collect(),
            router: buf
                .router
                .iter()
                .map(|r| r.as_ref().map(|m| Moments::zeros(m.data.len())))
                .collect(),
            head: Moments::zeros(buf.head.data.len()),
        }
    }
}

// ---------------------------------------------------------------------------
// Per-task training
// ---------------------------------------------------------------------------

fn backward_sample(
    model: &ToyModel,
    rec: &ForwardRecord,
    task_id: usize,
    dlogits: &DenseVector,
    buf: &mut GradBuffer,
) -> Result<()> {
    let block = model
        .head
        .block_for(task_id)
        .ok_or_else(|| MoraError::InvalidConfig(format!("no head block for task {task_id}")))?;
    let features = rec.features();
    let cols = block.weight.cols;
    for r in 0..block.weight.rows {
        let g = dlogits.data[r];
        if g != 0.0 {
            for c in 0..cols {
                buf.head.data[r * cols + c] += g * features.data[c];
            }
        }
    }

    let mut d_h = block.weight.matvec_t(dlogits)?;
    for l in (0..model.num_layers()).rev() {
        let h_out = &rec.layer_inputs[l + 1];
        let mut dz = DenseVector::zeros(h_out.len());
        for i in 0..h_out.len() {
            let h = h_out.data[i];
            dz.data[i] = d_h.data[i] * (1.0 - h * h);
        }
        let x_l = &rec.layer_inputs[l];
        let layer = &model.trunk[l];
        let (grads, d_router) = match &rec.traces[l] {
            LayerTrace::Gate(trace) => (adapter_backward(layer, x_l, trace, &dz)?, None),
            LayerTrace::Router(trace) => {
                let router = model.routers[l]
                    .as_ref()
                    .ok_or(MoraError::MissingRouter(layer.cfg.mode))?;
                let (g, dr) = if layer.cfg.mode == GateMode::RouterLora {
                    moe_lora_backward(layer, router, x_l, trace, &dz)?
                } else {
                    rank_router_backward(layer, router, x_l, trace, &dz)?
                };
                (g, Some(dr))
            }
        };
        buf.add_units(l, &grads)?;
        if let Some(dr) = d_router {
            if let Some(acc) = buf.router[l].as_mut() {
                for (a, b) in acc.data.iter_mut().zip(&dr.data) {
                    *a += b;
                }
            }
        }
        d_h = grads.d_x;
    }
    Ok(())
}

fn apply_updates(
    model: &mut ToyModel,
    buf: &GradBuffer,
    opt: &mut OptimState,
    cfg: &OptimConfig,
) {
    opt.step += 1;
    let step = opt.step;
    for l in 0..model.trunk.len() {
        for (slot, &ui) in buf.unit_index[l].iter().enumerate() {
            let unit = &mut model.trunk[l].pool.units[ui];
            adamw_step(
                &mut unit.key_a.data,
                &buf.unit_key[l][slot].data,
                &mut opt.unit_key[l][slot],
                step,
                cfg,
            );
            adamw_step(
                &mut unit.value_b.data,
                &buf.unit_value[l][slot].data,
                &mut opt.unit_value[l][slot],
                step,
                cfg,
            );
        }
        if let (Some(router), Some(grad), Some(mom)) = (
            model.routers[l].as_mut(),
            buf.router[l].as_ref(),
            opt.router[l].as_mut(),
        ) {
            adamw_step(&mut router.w_r.data, &grad.data, mom, step, cfg);
        }
    }
    let block = &mut model.head.blocks[buf.head_block];
    adamw_step(&mut block.weight.data, &buf.head.data, &mut opt.head, step, cfg);
}

/// Optimizes the current task's trainable parameters for the configured
/// number of iterations. Batches cycle the task's materialized training
/// split in order; gradients are batch means accumulated in pool order.
/// Returns the mean loss of the final iteration.
pub fn train_task(model: &mut ToyModel, task: &TaskSpec, cfg: &RunConfig) -> Result<f64> {
    match model.head.block_for(task.task_id) {
        Some(b) if !b.frozen => {}
        Some(_) => {
            return Err(MoraError::InvalidConfig(format!(
                "head block for task {} is frozen; tasks cannot be retrained",
                task.task_id
            )))
        }
        None => {
            return Err(MoraError::InvalidConfig(format!(
                "grow the model for task {} before training it",
                task.task_id
            )))
        }
    }
    let (xs, labels) = train_split(task)?;
    let mut buf = GradBuffer::new(model)?;
    let mut opt = OptimState::new(&buf);
    let batch = cfg.train.batch_size;
    let mut last_loss = 0.0;
    for iter in 0..cfg.train.iters_per_task {
        buf.zero();
        let mut loss_sum = 0.0;
        for j in 0..batch {
            let idx = (iter * batch + j) % xs.len();
            let rec = model.forward(&xs[idx])?;
            let logits = model.logits_for_task(rec.features(), task.task_id)?;
            let (loss, dlogits) = cross_entropy(&logits, labels[idx])?;
            loss_sum += loss;
            backward_sample(model, &rec, task.task_id, &dlogits, &mut buf)?;
        }
        buf.scale(1.0 / batch as f64);
        apply_updates(model, &buf, &mut opt, &cfg.optim);
        last_loss = loss_sum / batch as f64;
    }
    Ok(last_loss)
}

// ---------------------------------------------------------------------------
// Evaluation and metrics
// ---------------------------------------------------------------------------

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// Accuracy on the task's held-out split, scored against its own head block.
pub fn evaluate_task_accuracy(model: &ToyModel, task: &TaskSpec) -> Result<f64> {
    let (xs, labels) = test_split(task)?;
    let mut correct = 0usize;
    for (x, &label) in xs.iter().zip(&labels) {
        let rec = model.forward(x)?;
        let logits = model.logits_for_task(rec.features(), task.task_id)?;
        if argmax(&logits.data) == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / xs.len() as f64)
}

/// One row of the accuracy matrix: the current model scored on every task.
pub fn evaluate_matrix_row(model: &ToyModel, stream: &TaskStream) -> Result<Vec<f64>> {
    stream
        .tasks
        .iter()
        .map(|t| evaluate_task_accuracy(model, t))
        .collect()
}

/// `rows[i][j]` is accuracy on task j+1's held-out split after finishing
/// training task i+1. Rows are appended as tasks complete.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyMatrix {
    pub num_tasks: usize,
    pub rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new(num_tasks: usize) -> Self {
        Self {
            num_tasks,
            rows: Vec::new(),
        }
    }

    pub fn is_complete(&self) -> bool {
        self.rows.len() == self.num_tasks && self.rows.iter().all(|r| r.len() == self.num_tasks)
    }
}

/// Per-task and aggregate continual learning metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskMetrics {
    /// 1-based task position.
    pub task: usize,
    /// Mean accuracy on this task before it was trained. The first task has
    /// no such value.
    pub transfer: Option<f64>,
    pub average: Option<f64>,
    /// Accuracy after the final task.
    pub last: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub per_task: Vec<TaskMetrics>,
    pub transfer: Option<f64>,
    pub average: Option<f64>,
    pub last: f64,
    /// Alternative aggregate: each task's mean accuracy over every checkpoint
    /// from its own training onward, averaged over tasks.
    pub step_mean_average: f64,
}

/// Folds a complete accuracy matrix into the standard metrics.
pub fn compute_metrics(matrix: &AccuracyMatrix) -> Result<MetricsReport> {
    if !matrix.is_complete() {
        return Err(MoraError::InvalidConfig(format!(
            "accuracy matrix incomplete: {} of {} rows",
            matrix.rows.len(),
            matrix.num_tasks
        )));
    }
    let t = matrix.num_tasks;
    let mut per_task = Vec::with_capacity(t);
    for j in 0..t {
        let last = matrix.rows[t - 1][j];
        let transfer = if j == 0 {
            None
        } else {
            Some((0..j).map(|i| matrix.rows[i][j]).sum::<f64>() / j as f64)
        };
        per_task.push(TaskMetrics {
            task: j + 1,
            transfer,
            average: transfer.map(|tr| 0.5 * (tr + last)),
            last,
        });
    }
    let last = per_task.iter().map(|m| m.last).sum::<f64>() / t as f64;
    let transfers: Vec<f64> = per_task.iter().filter_map(|m| m.transfer).collect();
    let transfer = if transfers.is_empty() {
        None
    } else {
        Some(transfers.iter().sum::<f64>() / transfers.len() as f64)
    };
    let average = transfer.map(|tr| 0.5 * (tr + last));
    let step_mean_average = (0..t)
        .map(|j| (j..t).map(|i| matrix.rows[i][j]).sum::<f64>() / (t - j) as f64)
        .sum::<f64>()
        / t as f64;
    Ok(MetricsReport {
        per_task,
        transfer,
        average,
        last,
        step_mean_average,
    })
}

// ---------------------------------------------------------------------------
// Pretraining
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    pub train_accuracy: f64,
    pub train_loss: f64,
    pub heldout_accuracy: f64,
    pub heldout_loss: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub trunk: Vec<DenseMatrix>,
    pub report: PretrainReport,
}

fn gaussian_matrix(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> DenseMatrix {
    DenseMatrix {
        rows,
        cols,
        data: (0..rows * cols)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect(),
    }
}

/// Trains the trunk to convergence on a broad synthetic distribution (many
/// unit-norm prototype classes, no shared structure, no rotation) with a
/// throwaway readout, then hands the trunk over to be frozen for the
/// continual phase. `pretrain_iters = 0` returns the random trunk as-is.
pub fn pretrain_base(cfg: &RunConfig) -> Result<PretrainOutcome> {
    let d = cfg.stream.input_dim;
    let hidden = cfg.model.hidden_dim;
    let mut init_rng = rng_for(cfg.seed, TAG_INIT, 0);
    let mut trunk: Vec<DenseMatrix> = Vec::new();
    for l in 0..cfg.model.trunk_layers {
        let cols = if l == 0 { d } else { hidden };
        trunk.push(gaussian_matrix(hidden, cols, (1.0 / cols as f64).sqrt(), &mut init_rng));
    }

    let pre_cfg = StreamConfig {
        tasks: 1,
        classes_per_task: cfg.train.pretrain_classes,
        input_dim: d,
        shared_dim: 0,
        shared_fraction: 0.0,
        noise_sigma: cfg.stream.noise_sigma,
        shift_strength: 0.0,
        train_size: PRETRAIN_POOL,
        test_size: cfg.stream.test_size.max(256),
    };
    let pre_stream = make_stream(&pre_cfg, derive_seed(cfg.seed, TAG_PRETRAIN, 0))?;
    let task = &pre_stream.tasks[0];
    let (xs, labels) = train_split(task)?;

    let mut head = DenseMatrix::zeros(pre_cfg.classes_per_task, hidden);
    let optim = OptimConfig {
        lr: cfg.train.pretrain_lr,
        ..cfg.optim
    };

    let forward = |trunk: &[DenseMatrix], x: &DenseVector| -> Result<Vec<DenseVector>> {
        let mut acts = Vec::with_capacity(trunk.len() + 1);
        let mut h = x.clone();
        for w in trunk {
            let z = w.matvec(&h)?;
            acts.push(h);
            h = DenseVector::new(z.data.iter().map(|v| v.tanh()).collect());
        }
        acts.push(h);
        Ok(acts)
    };

    if cfg.train.pretrain_iters > 0 {
        let batch = cfg.train.batch_size;
        let mut trunk_mom: Vec<Moments> =
            trunk.iter().map(|w| Moments::zeros(w.data.len())).collect();
        let mut head_mom = Moments::zeros(head.data.len());
        let mut trunk_grad: Vec<DenseMatrix> =
            trunk.iter().map(|w| DenseMatrix::zeros(w.rows, w.cols)).collect();
        let mut head_grad = DenseMatrix::zeros(head.rows, head.cols);

        for iter in 0..cfg.train.pretrain_iters {
            for g in trunk_grad.iter_mut() {
                g.data.iter_mut().for_each(|v| *v = 0.0);
            }
            head_grad.data.iter_mut().for_each(|v| *v = 0.0);

            for j in 0..batch {
                let idx = (iter * batch + j) % xs.len();
                let acts = forward(&trunk, &xs[idx])?;
                let features = acts.last().unwrap();
                let logits = head.matvec(features)?;
                let (_, dlogits) = cross_entropy(&logits, labels[idx])?;

                for r in 0..head.rows {
                    for c in 0..head.cols {
                        head_grad.data[r * head.cols + c] +=
                            dlogits.data[r] * features.data[c];
                    }
                }
                let mut d_h = head.matvec_t(&dlogits)?;
                for l in (0..trunk.len()).rev() {
                    let h_out = &acts[l + 1];
                    let x_l = &acts[l];
                    let mut dz = vec![0.0; h_out.len()];
                    for i in 0..h_out.len() {
                        dz[i] = d_h.data[i] * (1.0 - h_out.data[i] * h_out.data[i]);
                    }
                    let w = &trunk[l];
                    for r in 0..w.rows {
                        for c in 0..w.cols {
                            trunk_grad[l].data[r * w.cols + c] += dz[r] * x_l.data[c];
                        }
                    }
                    d_h = w.matvec_t(&DenseVector::new(dz))?;
                }
            }

            let scale = 1.0 / batch as f64;
            for g in trunk_grad.iter_mut() {
                g.data.iter_mut().for_each(|v| *v *= scale);
            }
            head_grad.data.iter_mut().for_each(|v| *v *= scale);
            let step = iter as u64 + 1;
            for l in 0..trunk.len() {
                adamw_step(&mut trunk[l].data, &trunk_grad[l].data, &mut trunk_mom[l], step, &optim);
            }
            adamw_step(&mut head.data, &head_grad.data, &mut head_mom, step, &optim);
        }
    }

    let eval = |xs: &[DenseVector], labels: &[usize]| -> Result<(f64, f64)> {
        let mut correct = 0usize;
        let mut loss_sum = 0.0;
        for (x, &label) in xs.iter().zip(labels) {
            let acts = forward(&trunk, x)?;
            let logits = head.matvec(acts.last().unwrap())?;
            let (loss, _) = cross_entropy(&logits, label)?;
            loss_sum += loss;
            if argmax(&logits.data) == label {
                correct += 1;
            }
        }
        Ok((correct as f64 / xs.len() as f64, loss_sum / xs.len() as f64))
    };
    let (train_accuracy, train_loss) = eval(&xs, &labels)?;
    let (hx, hl) = test_split(task)?;
    let (heldout_accuracy, heldout_loss) = eval(&hx, &hl)?;

    Ok(PretrainOutcome {
        trunk,
        report: PretrainReport {
            train_accuracy,
            train_loss,
            heldout_accuracy,
            heldout_loss,
        },
    })
}

// ---------------------------------------------------------------------------
// The continual loop
// ---------------------------------------------------------------------------

/// Bit-exact snapshot of everything a finished task is supposed to pin down.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSnapshot {
    /// Per layer, per unit: (key bits, value bits, task_id, frozen).
    pub units: Vec<Vec<(Vec<u64>, Vec<u64>, usize, bool)>>,
    /// Per head block: weight bits.
    pub head_blocks: Vec<Vec<u64>>,
    /// Per layer: base weight bits.
    pub trunk_w0: Vec<Vec<u64>>,
}

pub fn snapshot_model_bits(model: &ToyModel) -> TaskSnapshot {
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<u64>>();
    TaskSnapshot {
        units: model
            .trunk
            .iter()
            .map(|l| {
                l.pool
                    .units
                    .iter()
                    .map(|u| (bits(&u.key_a.data), bits(&u.value_b.data), u.task_id, u.frozen))
                    .collect()
            })
            .collect(),
        head_blocks: model
            .head
            .blocks
            .iter()
            .map(|b| bits(&b.weight.data))
            .collect(),
        trunk_w0: model.trunk.iter().map(|l| bits(&l.w0.data)).collect(),
    }
}

/// Grows every per-task structure for `task_id`: adapter pools (per the
/// mode's growth policy), router columns, and the head block.
pub fn grow_for_task(model: &mut ToyModel, cfg: &RunConfig, task_id: usize) -> Result<()> {
    let r = cfg.adapter.r_per_task;
    let mut rng = rng_for(cfg.seed, TAG_GROW, task_id as u64);
    match cfg.mode.growth_policy() {
        GrowthPolicy::GrowAndFreeze => {
            for layer in model.trunk.iter_mut() {
                layer.grow(r, task_id, &mut rng)?;
            }
        }
        GrowthPolicy::SingleSharedPool => {
            if task_id == 1 {
                for layer in model.trunk.iter_mut() {
                    layer.grow(r, 1, &mut rng)?;
                }
            }
        }
    }
    if cfg.mode.uses_router() {
        let per_task = match cfg.mode.gate_mode() {
            GateMode::RouterLora => 1,
            _ => r,
        };
        for l in 0..model.trunk.len() {
            let d_in = model.trunk[l].d_in();
            let router = model.routers[l].get_or_insert_with(|| RouterParams::new(d_in));
            router.add_experts(per_task);
        }
    }
    model.head.grow(task_id)?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub matrix: AccuracyMatrix,
    pub model: ToyModel,
    /// Snapshot taken right after each task finished training.
    pub snapshots: Vec<TaskSnapshot>,
}

/// Runs tasks `first_task..=T` on an existing model, appending matrix rows
/// and snapshots. `first_task` is 1-based; pass 1 for a fresh run.
pub fn run_tasks(
    model: &mut ToyModel,
    stream: &TaskStream,
    cfg: &RunConfig,
    first_task: usize,
    matrix: &mut AccuracyMatrix,
    snapshots: &mut Vec<TaskSnapshot>,
) -> Result<()> {
    for t in first_task..=stream.tasks.len() {
        grow_for_task(model, cfg, t)?;
        train_task(model, &stream.tasks[t - 1], cfg)?;
        matrix.rows.push(evaluate_matrix_row(model, stream)?);
        snapshots.push(snapshot_model_bits(model));
    }
    Ok(())
}

/// Full continual benchmark: build the model around the pretrained trunk and
/// run every task in the stream.
pub fn continual_run(cfg: &RunConfig, trunk_w0s: Vec<DenseMatrix>) -> Result<RunOutcome> {
    let stream = make_stream(&cfg.stream, cfg.seed)?;
    let mut model = build_model(cfg, trunk_w0s)?;
    let mut matrix = AccuracyMatrix::new(stream.tasks.len());
    let mut snapshots = Vec::new();
    run_tasks(&mut model, &stream, cfg, 1, &mut matrix, &mut snapshots)?;
    Ok(RunOutcome {
        matrix,
        model,
        snapshots,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::RankUnit;
    use crate::config::RunMode;
    use crate::gate::GateConfig;

    fn tiny_config(mode: RunMode) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.mode = mode;
        cfg.stream.tasks = 2;
        cfg.stream.train_size = 128;
        cfg.stream.test_size = 64;
        cfg.train.iters_per_task = 60;
        cfg.train.pretrain_iters = 120;
        cfg.adapter.r_per_task = 8;
        cfg.gate.budget_k = 4;
        cfg
    }

    #[test]
    fn cross_entropy_uniform_logits_is_log_c() {
        let logits = DenseVector::zeros(4);
        let (loss, d) = cross_entropy(&logits, 2).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
        assert!((d.data.iter().sum::<f64>()).abs() < 1e-12);
        assert!((d.data[2] - (0.25 - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let logits = DenseVector::new(vec![0.3, -1.2, 2.0, 0.1]);
        let (_, d) = cross_entropy(&logits, 1).unwrap();
        let h = 1e-6;
        for i in 0..4 {
            let mut lp = logits.clone();
            lp.data[i] += h;
            let mut lm = logits.clone();
            lm.data[i] -= h;
            let fd =
                (cross_entropy(&lp, 1).unwrap().0 - cross_entropy(&lm, 1).unwrap().0) / (2.0 * h);
            assert!((fd - d.data[i]).abs() < 1e-6, "coord {i}");
        }
    }

    #[test]
    fn adamw_first_step_moves_by_lr_times_sign() {
        let cfg = OptimConfig {
            lr: 0.01,
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        let mut p = vec![1.0, -2.0];
        let g = vec![0.3, -0.7];
        let mut mom = Moments::zeros(2);
        adamw_step(&mut p, &g, &mut mom, 1, &cfg);
        // Bias corrections cancel at step 1, so the move is lr * sign(g) up
        // to the epsilon in the denominator.
        assert!((p[0] - (1.0 - 0.01)).abs() < 1e-6);
        assert!((p[1] - (-2.0 + 0.01)).abs() < 1e-6);
    }

    #[test]
    fn adamw_weight_decay_is_decoupled() {
        let cfg = OptimConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..OptimConfig::default()
        };
        let mut p = vec![2.0];
        let mut mom = Moments::zeros(1);
        adamw_step(&mut p, &[0.0], &mut mom, 1, &cfg);
        // Zero gradient: only the decay term fires, p -= lr * wd * p.
        assert!((p[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn metrics_known_example() {
        let matrix = AccuracyMatrix {
            num_tasks: 2,
            rows: vec![vec![0.9, 0.5], vec![0.8, 0.9]],
        };
        let m = compute_metrics(&matrix).unwrap();
        assert_eq!(m.per_task[0].transfer, None);
        assert!((m.per_task[1].transfer.unwrap() - 0.5).abs() < 1e-12);
        assert!((m.transfer.unwrap() - 0.5).abs() < 1e-12);
        assert!((m.last - 0.85).abs() < 1e-12);
        assert!((m.average.unwrap() - 0.675).abs() < 1e-12);
        // Step-mean: task 1 averages 0.9 and 0.8, task 2 contributes 0.9.
        assert!((m.step_mean_average - (0.85 + 0.9) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn metrics_single_task_stream() {
        let matrix = AccuracyMatrix {
            num_tasks: 1,
            rows: vec![vec![0.75]],
        };
        let m = compute_metrics(&matrix).unwrap();
        assert_eq!(m.transfer, None);
        assert_eq!(m.average, None);
        assert!((m.last - 0.75).abs() < 1e-12);
    }

    #[test]
    fn metrics_require_a_complete_matrix() {
        let matrix = AccuracyMatrix {
            num_tasks: 3,
            rows: vec![vec![0.9, 0.1, 0.1]],
        };
        assert!(compute_metrics(&matrix).is_err());
    }

    #[test]
    fn pretraining_reaches_the_accuracy_floor() {
        let cfg = RunConfig::default();
        let out = pretrain_base(&cfg).unwrap();
        assert!(
            out.report.heldout_accuracy >= 0.9,
            "held-out accuracy {}",
            out.report.heldout_accuracy
        );
        assert!(out.report.train_accuracy >= 0.9);
    }

    #[test]
    fn pretraining_is_deterministic() {
        let cfg = tiny_config(RunMode::SelfAdaptive);
        let a = pretrain_base(&cfg).unwrap();
        let b = pretrain_base(&cfg).unwrap();
        for (wa, wb) in a.trunk.iter().zip(&b.trunk) {
            for (x, y) in wa.data.iter().zip(&wb.data) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn zero_pretraining_iterations_keeps_the_random_trunk() {
        let mut cfg = tiny_config(RunMode::SelfAdaptive);
        cfg.train.pretrain_iters = 0;
        let out = pretrain_base(&cfg).unwrap();
        assert_eq!(out.trunk.len(), cfg.model.trunk_layers);
    }

    #[test]
    fn continual_run_is_deterministic_and_learns() {
        let cfg = tiny_config(RunMode::SelfAdaptive);
        let trunk = pretrain_base(&cfg).unwrap().trunk;
        let a = continual_run(&cfg, trunk.clone()).unwrap();
        let b = continual_run(&cfg, trunk).unwrap();
        assert_eq!(a.matrix, b.matrix);
        assert!(a.matrix.is_complete());
        // The current task should be learnable well above chance.
        assert!(a.matrix.rows[0][0] > 0.7, "acc {}", a.matrix.rows[0][0]);
        assert!(a.matrix.rows[1][1] > 0.7, "acc {}", a.matrix.rows[1][1]);
    }

    #[test]
    fn finished_tasks_keep_their_bytes() {
        for mode in [RunMode::IncLora, RunMode::SelfAdaptive, RunMode::RouterLora] {
            let cfg = tiny_config(mode);
            let trunk = pretrain_base(&cfg).unwrap().trunk;
            let out = continual_run(&cfg, trunk).unwrap();
            let after_t1 = &out.snapshots[0];
            let final_snap = out.snapshots.last().unwrap();
            for l in 0..after_t1.units.len() {
                for (u, unit) in after_t1.units[l].iter().enumerate() {
                    if unit.2 == 1 {
                        assert_eq!(unit.0, final_snap.units[l][u].0, "{mode} key bits");
                        assert_eq!(unit.1, final_snap.units[l][u].1, "{mode} value bits");
                    }
                }
            }
            assert_eq!(after_t1.head_blocks[0], final_snap.head_blocks[0]);
            assert_eq!(after_t1.trunk_w0, final_snap.trunk_w0);
        }
    }

    #[test]
    fn seq_lora_keeps_one_trainable_pool() {
        let cfg = tiny_config(RunMode::SeqLora);
        let trunk = pretrain_base(&cfg).unwrap().trunk;
        let out = continual_run(&cfg, trunk).unwrap();
        for layer in &out.model.trunk {
            assert_eq!(layer.pool.len(), cfg.adapter.r_per_task);
            assert!(layer.pool.units.iter().all(|u| !u.frozen));
        }
    }

    #[test]
    fn router_modes_grow_router_columns() {
        let cfg = tiny_config(RunMode::RouterRank);
        let trunk = pretrain_base(&cfg).unwrap().trunk;
        let out = continual_run(&cfg, trunk).unwrap();
        let router = out.model.routers[0].as_ref().unwrap();
        assert_eq!(router.num_experts(), 2 * cfg.adapter.r_per_task);
    }

    // With new units exactly orthogonal to every old-task input and a budget
    // the old units already fill, growth cannot move a single bit of the old
    // task's evaluation.
    #[test]
    fn inert_growth_preserves_old_task_rows_exactly() {
        let d = 8;
        let gate = GateConfig {
            mode: GateMode::SelfAdaptive,
            tau: 0.1,
            budget_k: 1,
            delta: 0.2,
            eps: 1e-12,
            raw_scores_as_weights: false,
        };
        let mut cfg = RunConfig::default();
        cfg.stream.tasks = 1;
        cfg.stream.input_dim = d;
        cfg.stream.classes_per_task = 4;
        cfg.stream.shared_dim = 2;
        cfg.stream.noise_sigma = 0.0;
        cfg.stream.test_size = 32;
        cfg.model.hidden_dim = d;
        cfg.model.trunk_layers = 1;
        let stream = make_stream(&cfg.stream, 7).unwrap();
        let task = &stream.tasks[0];

        // One adapted layer; keys are the rotated prototypes themselves.
        let mut layer = AdaptedLinear::new(DenseMatrix::identity(d), gate);
        for (i, p) in task.class_prototypes.iter().enumerate() {
            layer.pool.units.push(RankUnit {
                key_a: task.rotation.matvec(p).unwrap(),
                value_b: DenseVector::new((0..d).map(|k| ((i + k) as f64).sin()).collect()),
                task_id: 1,
                frozen: true,
            });
        }
        let mut head = GrowingHead::new(d, 4);
        head.grow(1).unwrap();
        for (i, v) in head.blocks[0].weight.data.iter_mut().enumerate() {
            *v = (i as f64 * 0.37).cos();
        }
        head.blocks[0].frozen = true;
        let mut model = ToyModel {
            trunk: vec![layer],
            routers: vec![None],
            head,
        };

        let before = evaluate_task_accuracy(&model, task).unwrap();

        // New units orthogonal to the span of the old task's inputs.
        let protos: Vec<DenseVector> = task
            .class_prototypes
            .iter()
            .map(|p| task.rotation.matvec(p).unwrap())
            .collect();
        for j in 0..3 {
            let mut v: Vec<f64> = (0..d).map(|k| ((j * d + k) as f64 * 0.61).sin()).collect();
            for p in &protos {
                let dot: f64 = v.iter().zip(&p.data).map(|(a, b)| a * b).sum();
                let norm: f64 = p.data.iter().map(|a| a * a).sum();
                for (vi, pi) in v.iter_mut().zip(&p.data) {
                    *vi -= dot / norm * pi;
                }
            }
            model.trunk[0].pool.units.push(RankUnit {
                key_a: DenseVector::new(v),
                value_b: DenseVector::new(vec![9.0; d]),
                task_id: 2,
                frozen: false,
            });
        }
        model.head.grow(2).unwrap();

        let after = evaluate_task_accuracy(&model, task).unwrap();
        assert_eq!(before.to_bits(), after.to_bits());

        // The per-sample logits agree bitwise, not just the aggregate.
        let (xs, _) = test_split(task).unwrap();
        for x in &xs {
            let rec = model.forward(x).unwrap();
            if let LayerTrace::Gate(t) = &rec.traces[0] {
                for i in 4..7 {
                    assert_eq!(t.final_w[i], 0.0);
                }
            }
        }
    }

    #[test]
    fn training_requires_growth_first() {
        let cfg = tiny_config(RunMode::SelfAdaptive);
        let trunk = pretrain_base(&cfg).unwrap().trunk;
        let mut model = build_model(&cfg, trunk).unwrap();
        let stream = make_stream(&cfg.stream, cfg.seed).unwrap();
        assert!(train_task(&mut model, &stream.tasks[0], &cfg).is_err());
    }
}

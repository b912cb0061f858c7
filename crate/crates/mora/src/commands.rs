//! Implementations behind the CLI subcommands. Each command reads a config,
//! runs the relevant pipeline, writes CSV or JSONL artifacts into an output
//! directory, and prints a short progress log to stdout.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::analysis::{activation_profile, coverage_count, mean_gate_mass, reuse_matrix};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{RunConfig, RunMode};
use crate::taskgen::{make_stream, test_split};
use crate::trainer::{
    build_model, compute_metrics, continual_run, evaluate_matrix_row, grow_for_task,
    pretrain_base, train_task, AccuracyMatrix, LayerTrace, MetricsReport, ToyModel,
};
use crate::{MoraError, Result};

fn write_text(dir: &Path, name: &str, text: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), text)?;
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Pretrains the shared trunk and reports train/held-out quality.
/// Writes `pretrain_metrics.csv`.
pub fn cmd_pretrain(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    cfg.validate()?;
    let out = pretrain_base(cfg)?;
    let r = &out.report;
    let mut csv = String::from("split,accuracy,loss\n");
    let _ = writeln!(csv, "train,{},{}", r.train_accuracy, r.train_loss);
    let _ = writeln!(csv, "heldout,{},{}", r.heldout_accuracy, r.heldout_loss);
    write_text(out_dir, "pretrain_metrics.csv", &csv)?;
    println!(
        "pretrain: train acc {:.4} loss {:.4} | heldout acc {:.4} loss {:.4}",
        r.train_accuracy, r.train_loss, r.heldout_accuracy, r.heldout_loss
    );
    println!("wrote {}", out_dir.join("pretrain_metrics.csv").display());
    Ok(())
}

fn accuracy_matrix_csv(matrix: &AccuracyMatrix) -> String {
    let mut csv = String::from("after_task");
    for j in 1..=matrix.num_tasks {
        let _ = write!(csv, ",task{j}");
    }
    csv.push('\n');
    for (i, row) in matrix.rows.iter().enumerate() {
        let _ = write!(csv, "{}", i + 1);
        for v in row {
            let _ = write!(csv, ",{v}");
        }
        csv.push('\n');
    }
    csv
}

fn metrics_csv(report: &MetricsReport, include_step_mean: bool) -> String {
    let mut csv = String::from("task,transfer,average,last\n");
    for m in &report.per_task {
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            m.task,
            fmt_opt(m.transfer),
            fmt_opt(m.average),
            m.last
        );
    }
    let _ = writeln!(
        csv,
        "overall,{},{},{}",
        fmt_opt(report.transfer),
        fmt_opt(report.average),
        report.last
    );
    if include_step_mean {
        let _ = writeln!(csv, "overall_step_mean,,{},", report.step_mean_average);
    }
    csv
}

/// Runs the continual benchmark, checkpointing after every task. Writes
/// `accuracy_matrix.csv` and `metrics.csv`, plus `checkpoints/task{t}/`.
/// `resume` points at a checkpoint directory from a previous invocation;
/// its config must match exactly.
pub fn cmd_train(cfg: &RunConfig, out_dir: &Path, resume: Option<&Path>) -> Result<()> {
    cfg.validate()?;
    let stream = make_stream(&cfg.stream, cfg.seed)?;
    let (mut model, mut matrix, first_task) = match resume {
        Some(dir) => {
            let state = load_checkpoint(dir)?;
            if state.config != *cfg {
                return Err(MoraError::InvalidConfig(
                    "resume checkpoint was produced by a different config".into(),
                ));
            }
            println!(
                "resuming after task {} from {}",
                state.completed_tasks,
                dir.display()
            );
            (state.model, state.matrix, state.completed_tasks + 1)
        }
        None => {
            let pre = pretrain_base(cfg)?;
            println!(
                "pretrain: heldout acc {:.4} loss {:.4}",
                pre.report.heldout_accuracy, pre.report.heldout_loss
            );
            let model = build_model(cfg, pre.trunk)?;
            (model, AccuracyMatrix::new(stream.tasks.len()), 1)
        }
    };

    for t in first_task..=stream.tasks.len() {
        grow_for_task(&mut model, cfg, t)?;
        let loss = train_task(&mut model, &stream.tasks[t - 1], cfg)?;
        let row = evaluate_matrix_row(&model, &stream)?;
        println!(
            "task {t}: final loss {:.4}, own acc {:.4}, mean acc {:.4}",
            loss,
            row[t - 1],
            row.iter().sum::<f64>() / row.len() as f64
        );
        matrix.rows.push(row);
        let ckpt_dir = out_dir.join("checkpoints").join(format!("task{t}"));
        save_checkpoint(&ckpt_dir, cfg, &model, &matrix)?;
    }

    write_text(out_dir, "accuracy_matrix.csv", &accuracy_matrix_csv(&matrix))?;
    let report = compute_metrics(&matrix)?;
    write_text(
        out_dir,
        "metrics.csv",
        &metrics_csv(&report, cfg.train.report_step_mean_average),
    )?;
    println!(
        "overall: transfer {} average {} last {}",
        fmt_opt(report.transfer),
        fmt_opt(report.average),
        report.last
    );
    println!("wrote {}", out_dir.join("metrics.csv").display());
    Ok(())
}

/// One hyperparameter axis the ablation command can sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Budget,
    Tau,
    Delta,
    Mode,
}

impl FromStr for SweepAxis {
    type Err = MoraError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "budget" => Ok(SweepAxis::Budget),
            "tau" => Ok(SweepAxis::Tau),
            "delta" => Ok(SweepAxis::Delta),
            "mode" => Ok(SweepAxis::Mode),
            other => Err(MoraError::InvalidConfig(format!(
                "unknown sweep axis '{other}' (expected budget, tau, delta, or mode)"
            ))),
        }
    }
}

impl std::fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SweepAxis::Budget => "budget",
            SweepAxis::Tau => "tau",
            SweepAxis::Delta => "delta",
            SweepAxis::Mode => "mode",
        };
        f.write_str(s)
    }
}

/// Sweeps one axis, rerunning the full benchmark per value. The pretrained
/// trunk depends on none of the swept knobs, so it is trained once and
/// shared. Writes `sweep.csv` with one row per setting.
pub fn cmd_ablate(cfg: &RunConfig, axis: SweepAxis, out_dir: &Path) -> Result<()> {
    cfg.validate()?;
    let trunk = pretrain_base(cfg)?.trunk;
    let mut csv = String::from("axis,value,transfer,average,last\n");

    let mut runs: Vec<(String, RunConfig)> = Vec::new();
    match axis {
        SweepAxis::Budget => {
            for k in [2usize, 4, 8, 16, 32] {
                let mut c = cfg.clone();
                c.gate.budget_k = k;
                runs.push((k.to_string(), c));
            }
        }
        SweepAxis::Tau => {
            for tau in [0.001, 0.01, 0.1, 1.0] {
                let mut c = cfg.clone();
                c.gate.tau = tau;
                runs.push((tau.to_string(), c));
            }
        }
        SweepAxis::Delta => {
            for delta in [0.0, 0.1, 0.2, 0.3] {
                let mut c = cfg.clone();
                c.gate.delta = delta;
                runs.push((delta.to_string(), c));
            }
        }
        SweepAxis::Mode => {
            for mode in RunMode::all() {
                let mut c = cfg.clone();
                c.mode = mode;
                runs.push((mode.to_string(), c));
            }
        }
    }

    for (value, run_cfg) in runs {
        run_cfg.validate()?;
        let out = continual_run(&run_cfg, trunk.clone())?;
        let report = compute_metrics(&out.matrix)?;
        println!(
            "{axis}={value}: transfer {} average {} last {}",
            fmt_opt(report.transfer),
            fmt_opt(report.average),
            report.last
        );
        let _ = writeln!(
            csv,
            "{axis},{value},{},{},{}",
            fmt_opt(report.transfer),
            fmt_opt(report.average),
            report.last
        );
    }
    write_text(out_dir, "sweep.csv", &csv)?;
    println!("wrote {}", out_dir.join("sweep.csv").display());
    Ok(())
}

/// Samples per task whose gate traces land in `traces.jsonl`.
const TRACE_SAMPLES: usize = 4;

fn trace_lines(model: &ToyModel, cfg: &RunConfig) -> Result<String> {
    let stream = make_stream(&cfg.stream, cfg.seed)?;
    let mut out = String::new();
    for task in &stream.tasks {
        let (xs, _) = test_split(task)?;
        for (s, x) in xs.iter().take(TRACE_SAMPLES).enumerate() {
            let rec = model.forward(x)?;
            for (l, trace) in rec.traces.iter().enumerate() {
                let line = match trace {
                    LayerTrace::Gate(t) => serde_json::json!({
                        "task": task.task_id,
                        "sample": s,
                        "layer": l,
                        "kind": "gate",
                        "scores": t.raw_scores_s,
                        "weights": t.final_w,
                        "support": t.support(),
                    }),
                    LayerTrace::Router(t) => serde_json::json!({
                        "task": task.task_id,
                        "sample": s,
                        "layer": l,
                        "kind": "router",
                        "logits": t.logits,
                        "weights": t.unit_w,
                    }),
                };
                out.push_str(&line.to_string());
                out.push('\n');
            }
        }
    }
    Ok(out)
}

/// Inspects a trained model: per-unit activation statistics, how many units
/// carry 99% of the gate mass per task, cross-task reuse shares, and raw
/// gate traces. Analyzes `base` if given, otherwise trains from scratch.
/// Writes `activation_profile.csv`, `coverage.csv`, `reuse_matrix.csv`, and
/// `traces.jsonl`.
pub fn cmd_analyze(cfg: &RunConfig, base: Option<&Path>, out_dir: &Path) -> Result<()> {
    let (cfg, model) = match base {
        Some(dir) => {
            let state = load_checkpoint(dir)?;
            if state.completed_tasks < state.matrix.num_tasks {
                println!(
                    "note: checkpoint covers {} of {} tasks",
                    state.completed_tasks, state.matrix.num_tasks
                );
            }
            (state.config, state.model)
        }
        None => {
            cfg.validate()?;
            let trunk = pretrain_base(cfg)?.trunk;
            (cfg.clone(), continual_run(cfg, trunk)?.model)
        }
    };
    let stream = make_stream(&cfg.stream, cfg.seed)?;

    let profile = activation_profile(&model, &stream.tasks)?;
    let mut csv = String::from("layer,unit,task_id,mean_abs_weight,activation_rate\n");
    for lp in &profile {
        for u in &lp.units {
            let _ = writeln!(
                csv,
                "{},{},{},{},{}",
                lp.layer, u.index, u.task_id, u.mean_abs_weight, u.activation_rate
            );
        }
    }
    write_text(out_dir, "activation_profile.csv", &csv)?;

    let mut csv = String::from("layer,task,ranks_for_99pct\n");
    for task in &stream.tasks {
        let mass = mean_gate_mass(&model, task)?;
        for (l, layer_mass) in mass.iter().enumerate() {
            let c = coverage_count(layer_mass, 0.99)?;
            let _ = writeln!(csv, "{},{},{}", l, task.task_id, c);
        }
    }
    write_text(out_dir, "coverage.csv", &csv)?;

    let reuse = reuse_matrix(&model, &stream)?;
    let mut csv = String::from("eval_task,source_task,share\n");
    for (i, row) in reuse.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            let _ = writeln!(csv, "{},{},{}", i + 1, j + 1, v);
        }
    }
    write_text(out_dir, "reuse_matrix.csv", &csv)?;

    write_text(out_dir, "traces.jsonl", &trace_lines(&model, &cfg)?)?;
    println!(
        "wrote activation_profile.csv, coverage.csv, reuse_matrix.csv, traces.jsonl in {}",
        out_dir.display()
    );
    Ok(())
}

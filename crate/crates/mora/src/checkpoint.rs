//! On-disk snapshots of a run: a TOML manifest describing shapes, task ids,
//! and freeze flags, next to raw little-endian f64 blobs for every tensor.
//! Each blob's SHA-256 is recorded in the manifest and verified on load, so
//! a corrupted or hand-edited checkpoint fails loudly instead of resuming
//! from silently wrong weights.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::{AdaptedLinear, RankUnit};
use crate::baselines::RouterParams;
use crate::config::RunConfig;
use crate::numerics::{DenseMatrix, DenseVector};
use crate::trainer::{AccuracyMatrix, GrowingHead, HeadBlock, ToyModel};
use crate::{MoraError, Result};

const MANIFEST_VERSION: u32 = 1;
const MANIFEST_NAME: &str = "manifest.toml";

#[derive(Debug, Serialize, Deserialize)]
struct UnitMeta {
    task_id: usize,
    frozen: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerMeta {
    d_in: usize,
    d_out: usize,
    units: Vec<UnitMeta>,
    router_experts: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct BlockMeta {
    task_id: usize,
    frozen: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    completed_tasks: usize,
    num_tasks: usize,
    config: RunConfig,
    layers: Vec<LayerMeta>,
    head_blocks: Vec<BlockMeta>,
    /// blob filename -> sha256 hex digest
    files: BTreeMap<String, String>,
}

/// Everything needed to continue a run where it stopped.
#[derive(Debug)]
pub struct CheckpointState {
    pub config: RunConfig,
    pub model: ToyModel,
    pub matrix: AccuracyMatrix,
    pub completed_tasks: usize,
}

fn f64s_to_bytes(data: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * 8);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn bytes_to_f64s(bytes: &[u8], file: &str) -> Result<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return Err(MoraError::Checkpoint(format!(
            "{file}: length {} is not a multiple of 8",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut hex = String::with_capacity(64);
    for b in digest {
        hex.push_str(&format!("{b:02x}"));
    }
    hex
}

struct BlobWriter<'a> {
    dir: &'a Path,
    files: BTreeMap<String, String>,
}

impl<'a> BlobWriter<'a> {
    fn write(&mut self, name: &str, data: &[f64]) -> Result<()> {
        let bytes = f64s_to_bytes(data);
        self.files.insert(name.to_string(), sha256_hex(&bytes));
        fs::write(self.dir.join(name), bytes)?;
        Ok(())
    }
}

/// Writes the model, accuracy rows so far, and the config into `dir`.
/// The manifest lands last, so a directory with a manifest is complete.
pub fn save_checkpoint(
    dir: &Path,
    cfg: &RunConfig,
    model: &ToyModel,
    matrix: &AccuracyMatrix,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut writer = BlobWriter {
        dir,
        files: BTreeMap::new(),
    };

    let mut layers = Vec::new();
    for (l, layer) in model.trunk.iter().enumerate() {
        writer.write(&format!("layer{l}_w0.bin"), &layer.w0.data)?;
        let mut keys = Vec::new();
        let mut values = Vec::new();
        let mut units = Vec::new();
        for unit in &layer.pool.units {
            keys.extend_from_slice(&unit.key_a.data);
            values.extend_from_slice(&unit.value_b.data);
            units.push(UnitMeta {
                task_id: unit.task_id,
                frozen: unit.frozen,
            });
        }
        writer.write(&format!("layer{l}_keys.bin"), &keys)?;
        writer.write(&format!("layer{l}_values.bin"), &values)?;
        let router_experts = match &model.routers[l] {
            Some(r) => {
                writer.write(&format!("layer{l}_router.bin"), &r.w_r.data)?;
                r.num_experts()
            }
            None => 0,
        };
        layers.push(LayerMeta {
            d_in: layer.d_in(),
            d_out: layer.d_out(),
            units,
            router_experts,
        });
    }

    let mut head_blocks = Vec::new();
    for (t, block) in model.head.blocks.iter().enumerate() {
        writer.write(&format!("head{t}.bin"), &block.weight.data)?;
        head_blocks.push(BlockMeta {
            task_id: block.task_id,
            frozen: block.frozen,
        });
    }

    let flat_rows: Vec<f64> = matrix.rows.iter().flatten().copied().collect();
    writer.write("acc_matrix.bin", &flat_rows)?;

    let manifest = Manifest {
        version: MANIFEST_VERSION,
        completed_tasks: matrix.rows.len(),
        num_tasks: matrix.num_tasks,
        config: cfg.clone(),
        layers,
        head_blocks,
        files: writer.files,
    };
    let text = toml::to_string_pretty(&manifest)
        .map_err(|e| MoraError::Checkpoint(format!("manifest serialization: {e}")))?;
    let tmp = dir.join(format!("{MANIFEST_NAME}.tmp"));
    fs::write(&tmp, text)?;
    fs::rename(&tmp, dir.join(MANIFEST_NAME))?;
    Ok(())
}

struct BlobReader {
    dir: PathBuf,
    files: BTreeMap<String, String>,
}

impl BlobReader {
    fn read(&self, name: &str, expected_len: usize) -> Result<Vec<f64>> {
        let want = self
            .files
            .get(name)
            .ok_or_else(|| MoraError::Checkpoint(format!("{name} missing from manifest")))?;
        let bytes = fs::read(self.dir.join(name))?;
        let got = sha256_hex(&bytes);
        if &got != want {
            return Err(MoraError::ChecksumMismatch(name.to_string()));
        }
        let data = bytes_to_f64s(&bytes, name)?;
        if data.len() != expected_len {
            return Err(MoraError::Checkpoint(format!(
                "{name}: expected {expected_len} values, found {}",
                data.len()
            )));
        }
        Ok(data)
    }
}

/// Loads and verifies a checkpoint directory written by [`save_checkpoint`].
pub fn load_checkpoint(dir: &Path) -> Result<CheckpointState> {
    let text = fs::read_to_string(dir.join(MANIFEST_NAME))?;
    let manifest: Manifest = toml::from_str(&text)
        .map_err(|e| MoraError::Checkpoint(format!("manifest parse: {e}")))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(MoraError::Checkpoint(format!(
            "unsupported checkpoint version {} (expected {MANIFEST_VERSION})",
            manifest.version
        )));
    }
    manifest.config.validate()?;
    let reader = BlobReader {
        dir: dir.to_path_buf(),
        files: manifest.files,
    };

    let gate_cfg = manifest.config.gate_config();
    let mut trunk = Vec::new();
    let mut routers = Vec::new();
    for (l, meta) in manifest.layers.iter().enumerate() {
        let w0_data = reader.read(&format!("layer{l}_w0.bin"), meta.d_out * meta.d_in)?;
        let w0 = DenseMatrix::from_vec(meta.d_out, meta.d_in, w0_data)?;
        let mut layer = AdaptedLinear::new(w0, gate_cfg);
        let r = meta.units.len();
        let keys = reader.read(&format!("layer{l}_keys.bin"), r * meta.d_in)?;
        let values = reader.read(&format!("layer{l}_values.bin"), r * meta.d_out)?;
        for (u, um) in meta.units.iter().enumerate() {
            layer.pool.units.push(RankUnit {
                key_a: DenseVector::new(keys[u * meta.d_in..(u + 1) * meta.d_in].to_vec()),
                value_b: DenseVector::new(values[u * meta.d_out..(u + 1) * meta.d_out].to_vec()),
                task_id: um.task_id,
                frozen: um.frozen,
            });
        }
        routers.push(if meta.router_experts > 0 {
            let data = reader.read(
                &format!("layer{l}_router.bin"),
                meta.d_in * meta.router_experts,
            )?;
            Some(RouterParams {
                w_r: DenseMatrix::from_vec(meta.d_in, meta.router_experts, data)?,
            })
        } else {
            None
        });
        trunk.push(layer);
    }

    let hidden = manifest.config.model.hidden_dim;
    let classes = manifest.config.stream.classes_per_task;
    let mut head = GrowingHead::new(hidden, classes);
    for (t, bm) in manifest.head_blocks.iter().enumerate() {
        let data = reader.read(&format!("head{t}.bin"), classes * hidden)?;
        head.blocks.push(HeadBlock {
            weight: DenseMatrix::from_vec(classes, hidden, data)?,
            task_id: bm.task_id,
            frozen: bm.frozen,
        });
    }

    let flat = reader.read(
        "acc_matrix.bin",
        manifest.completed_tasks * manifest.num_tasks,
    )?;
    let matrix = AccuracyMatrix {
        num_tasks: manifest.num_tasks,
        rows: flat
            .chunks(manifest.num_tasks.max(1))
            .map(|c| c.to_vec())
            .collect(),
    };
    if matrix.rows.len() != manifest.completed_tasks {
        return Err(MoraError::Checkpoint(format!(
            "accuracy matrix has {} rows, manifest says {}",
            matrix.rows.len(),
            manifest.completed_tasks
        )));
    }

    Ok(CheckpointState {
        config: manifest.config,
        model: ToyModel {
            trunk,
            routers,
            head,
        },
        matrix,
        completed_tasks: manifest.completed_tasks,
    })
}

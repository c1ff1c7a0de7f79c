//! On-disk task sets: a JSON manifest plus raw little-endian f32 tensors
//! per task (`NNNNNN.enc.f32`, `NNNNNN.traj.f32`).

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::encoder::{Encoding, StateEncoder, ENCODING_DIM};
use super::graph::{build_gridworld_graph, tree_from_heap_indices, LatentGraph, Suite};
use super::task::{token_width, EnvConfig, Provenance, Split, Task, TaskSet};
use super::walk::Step;
use crate::error::{Error, Result};
use crate::store::{read_f32_le, read_json, write_f32_le, write_json};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRef {
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEntry {
    pub id: usize,
    pub split: Split,
    pub goal: usize,
    pub start: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tree_heaps: Option<Vec<u32>>,
    pub encodings: TensorRef,
    pub trajectory: TensorRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSetManifest {
    pub format: String,
    pub config: EnvConfig,
    pub provenance: Provenance,
    pub splits: SplitIndices,
    pub tasks: Vec<TaskEntry>,
}

pub fn manifest_for(ts: &TaskSet) -> TaskSetManifest {
    let width = token_width(ts.config.suite);
    let tasks = ts
        .tasks
        .iter()
        .map(|t| TaskEntry {
            id: t.id,
            split: t.split,
            goal: t.goal,
            start: t.start,
            tree_heaps: t.graph.heap_indices(),
            encodings: TensorRef {
                file: format!("tasks/{:06}.enc.f32", t.id),
                shape: vec![t.encoder.node_count(), ENCODING_DIM],
            },
            trajectory: TensorRef {
                file: format!("tasks/{:06}.traj.f32", t.id),
                shape: vec![t.steps.len(), width],
            },
        })
        .collect();
    TaskSetManifest {
        format: "icrl-taskset/1".into(),
        config: ts.config.clone(),
        provenance: ts.provenance.clone(),
        splits: SplitIndices {
            train: ts.split_indices(Split::Train),
            eval: ts.split_indices(Split::Eval),
            test: ts.split_indices(Split::Test),
        },
        tasks,
    }
}

pub fn save_taskset(ts: &TaskSet, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("tasks"))?;
    let manifest = manifest_for(ts);
    let width = token_width(ts.config.suite);
    for (t, entry) in ts.tasks.iter().zip(&manifest.tasks) {
        let enc: Vec<f32> = t.encoder.encodings.iter().flatten().copied().collect();
        write_f32_le(&dir.join(&entry.encodings.file), &enc)?;
        let mut traj = vec![0.0f32; t.steps.len() * width];
        for (i, row) in traj.chunks_exact_mut(width).enumerate() {
            t.write_token(i, row);
        }
        write_f32_le(&dir.join(&entry.trajectory.file), &traj)?;
    }
    // manifest last, so its presence marks a complete directory
    write_json(&dir.join(MANIFEST), &manifest)
}

pub fn load_manifest(dir: &Path) -> Result<TaskSetManifest> {
    read_json(&dir.join(MANIFEST))
}

pub fn load_taskset(dir: &Path) -> Result<TaskSet> {
    let manifest = load_manifest(dir)?;
    let suite = manifest.config.suite;
    let width = token_width(suite);
    let na = suite.action_count();
    let grid = Arc::new(build_gridworld_graph());
    let mut tasks = Vec::with_capacity(manifest.tasks.len());
    for entry in &manifest.tasks {
        let graph: Arc<LatentGraph> = match suite {
            Suite::Gridworld => grid.clone(),
            Suite::Tree => {
                let heaps = entry
                    .tree_heaps
                    .as_ref()
                    .ok_or_else(|| Error::Format(format!("task {} lacks tree_heaps", entry.id)))?;
                Arc::new(tree_from_heap_indices(heaps)?)
            }
        };
        let enc_raw = read_f32_le(&dir.join(&entry.encodings.file))?;
        if enc_raw.len() != graph.node_count * ENCODING_DIM {
            return Err(Error::Format(format!("task {} encodings have wrong size", entry.id)));
        }
        let encodings: Vec<Encoding> = enc_raw
            .chunks_exact(ENCODING_DIM)
            .map(|c| {
                let mut e = [0.0f32; ENCODING_DIM];
                e.copy_from_slice(c);
                e
            })
            .collect();
        let encoder = StateEncoder::from_encodings(manifest.config.sigma, encodings);
        let index = encoder.decoder();
        let traj = read_f32_le(&dir.join(&entry.trajectory.file))?;
        if traj.len() % width != 0 {
            return Err(Error::WidthMismatch {
                expected: width,
                got: traj.len(),
            });
        }
        let mut steps = Vec::with_capacity(traj.len() / width);
        for row in traj.chunks_exact(width) {
            let s = index
                .lookup(&row[..ENCODING_DIM])
                .ok_or_else(|| Error::Format("trajectory state not in encoder".into()))?;
            let a = row[ENCODING_DIM..ENCODING_DIM + na]
                .iter()
                .position(|&v| v == 1.0)
                .ok_or_else(|| Error::Format("action is not one-hot".into()))?;
            let sn = index
                .lookup(&row[ENCODING_DIM + na..2 * ENCODING_DIM + na])
                .ok_or_else(|| Error::Format("trajectory state not in encoder".into()))?;
            steps.push(Step {
                s: s as u16,
                a: a as u8,
                s_next: sn as u16,
                r: row[width - 1] == 1.0,
            });
        }
        tasks.push(Task {
            id: entry.id,
            graph,
            encoder,
            goal: entry.goal,
            start: entry.start,
            steps,
            split: entry.split,
        });
    }
    Ok(TaskSet {
        config: manifest.config,
        tasks,
        provenance: manifest.provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envcore::task::build_taskset;

    #[test]
    fn roundtrip_tree_and_grid() {
        for suite in [Suite::Gridworld, Suite::Tree] {
            let cfg = EnvConfig {
                trajectory_len: 40,
                ..EnvConfig::for_suite(suite)
            };
            let ts = build_taskset(10, 4, &cfg).unwrap();
            let dir = tempfile::tempdir().unwrap();
            save_taskset(&ts, dir.path()).unwrap();
            let back = load_taskset(dir.path()).unwrap();
            assert_eq!(back.tasks.len(), 10);
            for (a, b) in ts.tasks.iter().zip(&back.tasks) {
                assert_eq!(a.steps, b.steps);
                assert_eq!(a.encoder.encodings, b.encoder.encodings);
                assert_eq!(a.graph.heap_indices(), b.graph.heap_indices());
                assert_eq!(a.split, b.split);
            }
            let m1 = std::fs::read(dir.path().join(MANIFEST)).unwrap();
            let dir2 = tempfile::tempdir().unwrap();
            save_taskset(&build_taskset(10, 4, &cfg).unwrap(), dir2.path()).unwrap();
            assert_eq!(m1, std::fs::read(dir2.path().join(MANIFEST)).unwrap());
        }
    }
}

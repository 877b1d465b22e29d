//! Plain-text checkpoints: a JSON index plus one CSV file per matrix.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::layers::{LoraHead, LoraLinear};
use crate::lte::WorkerState;
use crate::network::{Activation, LossKind, Network};
use crate::numerics::Matrix;
use crate::optim::{AdamState, ParamState};
use crate::{Error, Result};

const INDEX: &str = "checkpoint.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct LayerIndex {
    rows: usize,
    cols: usize,
    rank: usize,
    heads: usize,
    alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct WorkerIndex {
    head: usize,
    local_steps: u64,
    /// Adam step counts for `(A, B)` per layer; absent under SGD.
    adam_steps: Option<Vec<(u64, u64)>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Index {
    version: String,
    layers: Vec<LayerIndex>,
    activations: Vec<Activation>,
    loss: LossKind,
    workers: Vec<WorkerIndex>,
}

/// Optimizer state and corrections of one worker, without its streams.
#[derive(Clone, Debug, PartialEq)]
pub struct WorkerCheckpoint {
    pub head: usize,
    pub local_steps: u64,
    pub optim: Vec<(ParamState, ParamState)>,
    pub correction: Vec<Matrix>,
}

impl From<&WorkerState> for WorkerCheckpoint {
    fn from(w: &WorkerState) -> Self {
        WorkerCheckpoint {
            head: w.head,
            local_steps: w.local_steps,
            optim: w.optim.clone(),
            correction: w.correction.clone(),
        }
    }
}

fn write_matrix(dir: &Path, name: &str, m: &Matrix) -> Result<()> {
    let path = dir.join(name);
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    m.write_csv(BufWriter::new(file))
}

fn read_matrix(dir: &Path, name: &str, shape: (usize, usize)) -> Result<Matrix> {
    let path = dir.join(name);
    let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
    let m = Matrix::read_csv(BufReader::new(file))?;
    if m.shape() != shape {
        return Err(Error::shape(
            "checkpoint",
            format!("{name}: {:?}, expected {shape:?}", m.shape()),
        ));
    }
    Ok(m)
}

/// Writes the network and worker states into `dir`, creating it if needed.
pub fn save(dir: &Path, net: &Network, workers: &[WorkerCheckpoint]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = Index {
        version: env!("CARGO_PKG_VERSION").to_string(),
        layers: Vec::new(),
        activations: net.activations().to_vec(),
        loss: net.loss_kind(),
        workers: Vec::new(),
    };
    for (l, layer) in net.layers().iter().enumerate() {
        let (rows, cols) = layer.shape();
        index.layers.push(LayerIndex {
            rows,
            cols,
            rank: layer.rank(),
            heads: layer.num_heads(),
            alpha: layer.alpha(),
        });
        write_matrix(dir, &format!("w{l}.csv"), layer.weight())?;
        for (h, head) in layer.heads().iter().enumerate() {
            write_matrix(dir, &format!("a{l}_{h}.csv"), &head.a)?;
            write_matrix(dir, &format!("b{l}_{h}.csv"), &head.b)?;
        }
    }
    for (i, w) in workers.iter().enumerate() {
        let mut adam_steps = Vec::new();
        for (l, (sa, sb)) in w.optim.iter().enumerate() {
            for (tag, state) in [("a", sa), ("b", sb)] {
                if let ParamState::Adam(s) = state {
                    write_matrix(dir, &format!("worker{i}_{tag}{l}_m.csv"), &s.m)?;
                    write_matrix(dir, &format!("worker{i}_{tag}{l}_v.csv"), &s.v)?;
                }
            }
            if let (ParamState::Adam(a), ParamState::Adam(b)) = (sa, sb) {
                adam_steps.push((a.step_count, b.step_count));
            }
            write_matrix(dir, &format!("worker{i}_v{l}.csv"), &w.correction[l])?;
        }
        index.workers.push(WorkerIndex {
            head: w.head,
            local_steps: w.local_steps,
            adam_steps: (!adam_steps.is_empty()).then_some(adam_steps),
        });
    }
    let path = dir.join(INDEX);
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::to_writer_pretty(BufWriter::new(file), &index)?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<(Network, Vec<WorkerCheckpoint>)> {
    let path = dir.join(INDEX);
    let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
    let index: Index = serde_json::from_reader(BufReader::new(file))?;
    let mut layers = Vec::with_capacity(index.layers.len());
    for (l, li) in index.layers.iter().enumerate() {
        let weight = read_matrix(dir, &format!("w{l}.csv"), (li.rows, li.cols))?;
        let heads = (0..li.heads)
            .map(|h| {
                Ok(LoraHead {
                    a: read_matrix(dir, &format!("a{l}_{h}.csv"), (li.rank, li.cols))?,
                    b: read_matrix(dir, &format!("b{l}_{h}.csv"), (li.rows, li.rank))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        layers.push(LoraLinear::from_parts(weight, heads, li.alpha)?);
    }
    let net = Network::new(layers, index.activations, index.loss)?;
    let mut workers = Vec::with_capacity(index.workers.len());
    for (i, wi) in index.workers.iter().enumerate() {
        let mut optim = Vec::new();
        let mut correction = Vec::new();
        for (l, li) in index.layers.iter().enumerate() {
            let shapes = [("a", (li.rank, li.cols)), ("b", (li.rows, li.rank))];
            let mut pair = Vec::with_capacity(2);
            for (k, (tag, shape)) in shapes.into_iter().enumerate() {
                let state = match &wi.adam_steps {
                    Some(steps) => {
                        let count = if k == 0 { steps[l].0 } else { steps[l].1 };
                        ParamState::Adam(AdamState {
                            m: read_matrix(dir, &format!("worker{i}_{tag}{l}_m.csv"), shape)?,
                            v: read_matrix(dir, &format!("worker{i}_{tag}{l}_v.csv"), shape)?,
                            step_count: count,
                        })
                    }
                    None => ParamState::Sgd,
                };
                pair.push(state);
            }
            let b = pair.pop().expect("two states");
            let a = pair.pop().expect("two states");
            optim.push((a, b));
            correction.push(read_matrix(
                dir,
                &format!("worker{i}_v{l}.csv"),
                (li.rows, li.cols),
            )?);
        }
        workers.push(WorkerCheckpoint {
            head: wi.head,
            local_steps: wi.local_steps,
            optim,
            correction,
        });
    }
    Ok((net, workers))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lte::{run_lte, MergePolicy, RunConfig};
    use crate::optim::{AdamConfig, OptimizerConfig};

    #[test]
    fn round_trip_is_exact() {
        let mut cfg =
            RunConfig::least_squares(5, 4, 4, 2, 2, OptimizerConfig::Adamw(AdamConfig::new(0.01)));
        cfg.hidden = vec![3];
        cfg.activation = Activation::Relu;
        cfg.base_init = Some(crate::numerics::InitScheme::kaiming());
        cfg.policy = MergePolicy::exact(3);
        cfg.steps = 7;
        cfg.analysis = false;
        let out = run_lte(&cfg).unwrap();
        let workers: Vec<WorkerCheckpoint> =
            out.workers.iter().map(WorkerCheckpoint::from).collect();
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &out.network, &workers).unwrap();
        let (net, loaded) = load(dir.path()).unwrap();
        assert_eq!(net, out.network);
        assert_eq!(loaded, workers);
    }

    #[test]
    fn missing_or_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load(dir.path()), Err(Error::Io { .. })));
        let layer = LoraLinear::new(Matrix::identity(2), 1, 1.0, 1).unwrap();
        let net = Network::new(vec![layer], vec![], LossKind::Mse).unwrap();
        save(dir.path(), &net, &[]).unwrap();
        fs::write(dir.path().join("w0.csv"), "1,2,3\n").unwrap();
        assert!(load(dir.path()).is_err());
    }
}

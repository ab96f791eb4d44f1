//! Checkpoint IO.
//!
//! A checkpoint is a directory holding `manifest.json` plus one raw tensor
//! file per entry (little-endian f32, row-major, no header). The manifest
//! records names, shapes and file assignments together with a free-form
//! `meta` value the owning component uses to rebuild itself; model
//! checkpoints store the full graph structure there, so arbitrary pruned
//! architectures round-trip without a builder.

use super::{BatchNorm, Conv2d, Linear, ModelGraph, Node, Op};
use crate::{Error, Result};
use ndarray::{Array1, Array2, Array4, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    file: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

const FORMAT: &str = "tensor-dir-v1";

/// Reader/writer for checkpoint directories.
pub struct TensorDir;

impl TensorDir {
    /// Write `meta` and the named tensors under `dir` (created if needed).
    pub fn save(dir: &Path, meta: serde_json::Value, tensors: &[(String, ArrayD<f32>)]) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(tensors.len());
        for (i, (name, array)) in tensors.iter().enumerate() {
            let file = format!("{i:04}.bin");
            let std = array.as_standard_layout();
            let data = std.as_slice().unwrap();
            let mut bytes = Vec::with_capacity(data.len() * 4);
            for v in data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            let mut f = fs::File::create(dir.join(&file))?;
            f.write_all(&bytes)?;
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: "f32".into(),
                shape: array.shape().to_vec(),
                file,
            });
        }
        let manifest = Manifest { format: FORMAT.into(), meta, tensors: entries };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    /// Load the manifest meta and all tensors from `dir`.
    pub fn load(dir: &Path) -> Result<(serde_json::Value, BTreeMap<String, ArrayD<f32>>)> {
        let text = fs::read_to_string(dir.join("manifest.json"))
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.display())))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.format != FORMAT {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format `{}`",
                manifest.format
            )));
        }
        let mut tensors = BTreeMap::new();
        for entry in manifest.tensors {
            if entry.dtype != "f32" {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` has unsupported dtype `{}`",
                    entry.name, entry.dtype
                )));
            }
            let mut bytes = Vec::new();
            fs::File::open(dir.join(&entry.file))
                .map_err(|e| Error::Checkpoint(format!("{}: {e}", entry.file)))?
                .read_to_end(&mut bytes)?;
            let expected: usize = entry.shape.iter().product::<usize>() * 4;
            if bytes.len() != expected {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}`: {} bytes on disk, shape implies {expected}",
                    entry.name,
                    bytes.len()
                )));
            }
            let data: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let array = ArrayD::from_shape_vec(IxDyn(&entry.shape), data)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            if tensors.insert(entry.name.clone(), array).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor `{}`", entry.name)));
            }
        }
        Ok((manifest.meta, tensors))
    }
}

// ---- graph structure (de)serialization ----

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum OpSpec {
    Input,
    Conv {
        in_channels: usize,
        out_channels: usize,
        k: usize,
        stride: usize,
        padding: usize,
        relu: bool,
        bias: bool,
        bn: bool,
    },
    Linear {
        in_channels: usize,
        spatial: usize,
        out: usize,
        relu: bool,
        bias: bool,
    },
    Add { relu: bool },
    MaxPool { k: usize, stride: usize, padding: usize },
    GlobalAvgPool,
    Flatten,
}

#[derive(Serialize, Deserialize)]
struct NodeSpec {
    id: String,
    inputs: Vec<String>,
    #[serde(flatten)]
    op: OpSpec,
}

#[derive(Serialize, Deserialize)]
struct GraphSpec {
    name: String,
    input_shape: [usize; 3],
    classes: usize,
    nodes: Vec<NodeSpec>,
}

/// Save a model graph (structure and parameters) as a checkpoint directory.
pub fn save_graph(graph: &ModelGraph, dir: &Path) -> Result<()> {
    let mut nodes = Vec::new();
    let mut tensors: Vec<(String, ArrayD<f32>)> = Vec::new();
    for node in graph.nodes() {
        let inputs = node
            .inputs
            .iter()
            .map(|&i| graph.node(i).id.clone())
            .collect::<Vec<_>>();
        let op = match &node.op {
            Op::Input => OpSpec::Input,
            Op::Conv(c) => {
                let (co, ci, k, _) = c.w.dim();
                tensors.push((format!("{}.w", node.id), c.w.clone().into_dyn()));
                if let Some(b) = &c.b {
                    tensors.push((format!("{}.b", node.id), b.clone().into_dyn()));
                }
                if let Some(bn) = &c.bn {
                    tensors.push((format!("{}.bn.gamma", node.id), bn.gamma.clone().into_dyn()));
                    tensors.push((format!("{}.bn.beta", node.id), bn.beta.clone().into_dyn()));
                    tensors.push((format!("{}.bn.mean", node.id), bn.running_mean.clone().into_dyn()));
                    tensors.push((format!("{}.bn.var", node.id), bn.running_var.clone().into_dyn()));
                }
                OpSpec::Conv {
                    in_channels: ci,
                    out_channels: co,
                    k,
                    stride: c.stride,
                    padding: c.padding,
                    relu: c.relu,
                    bias: c.b.is_some(),
                    bn: c.bn.is_some(),
                }
            }
            Op::Linear(l) => {
                tensors.push((format!("{}.w", node.id), l.w.clone().into_dyn()));
                if let Some(b) = &l.b {
                    tensors.push((format!("{}.b", node.id), b.clone().into_dyn()));
                }
                OpSpec::Linear {
                    in_channels: l.in_channels,
                    spatial: l.spatial,
                    out: l.w.nrows(),
                    relu: l.relu,
                    bias: l.b.is_some(),
                }
            }
            Op::Add { relu } => OpSpec::Add { relu: *relu },
            Op::MaxPool { k, stride, padding } => {
                OpSpec::MaxPool { k: *k, stride: *stride, padding: *padding }
            }
            Op::GlobalAvgPool => OpSpec::GlobalAvgPool,
            Op::Flatten => OpSpec::Flatten,
        };
        nodes.push(NodeSpec { id: node.id.clone(), inputs, op });
    }
    let spec = GraphSpec {
        name: graph.name.clone(),
        input_shape: [graph.input_shape.0, graph.input_shape.1, graph.input_shape.2],
        classes: graph.classes,
        nodes,
    };
    TensorDir::save(dir, serde_json::to_value(&spec)?, &tensors)
}

fn take4(t: &mut BTreeMap<String, ArrayD<f32>>, name: &str) -> Result<Array4<f32>> {
    t.remove(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?
        .into_dimensionality()
        .map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))
}

fn take2(t: &mut BTreeMap<String, ArrayD<f32>>, name: &str) -> Result<Array2<f32>> {
    t.remove(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?
        .into_dimensionality()
        .map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))
}

fn take1(t: &mut BTreeMap<String, ArrayD<f32>>, name: &str) -> Result<Array1<f32>> {
    t.remove(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?
        .into_dimensionality()
        .map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))
}

/// Load a model graph saved by [`save_graph`].
pub fn load_graph(dir: &Path) -> Result<ModelGraph> {
    let (meta, mut tensors) = TensorDir::load(dir)?;
    let spec: GraphSpec = serde_json::from_value(meta)?;
    let mut by_id: BTreeMap<String, usize> = BTreeMap::new();
    let mut nodes = Vec::with_capacity(spec.nodes.len());
    for (i, ns) in spec.nodes.iter().enumerate() {
        let inputs = ns
            .inputs
            .iter()
            .map(|id| {
                by_id
                    .get(id)
                    .copied()
                    .ok_or_else(|| Error::Checkpoint(format!("node input `{id}` undefined")))
            })
            .collect::<Result<Vec<_>>>()?;
        let op = match &ns.op {
            OpSpec::Input => Op::Input,
            OpSpec::Conv { in_channels, out_channels, k, stride, padding, relu, bias, bn } => {
                let w = take4(&mut tensors, &format!("{}.w", ns.id))?;
                if w.dim() != (*out_channels, *in_channels, *k, *k) {
                    return Err(Error::Checkpoint(format!(
                        "tensor `{}.w` shape {:?} disagrees with manifest",
                        ns.id,
                        w.dim()
                    )));
                }
                let b = if *bias {
                    Some(take1(&mut tensors, &format!("{}.b", ns.id))?)
                } else {
                    None
                };
                let bn = if *bn {
                    Some(BatchNorm {
                        gamma: take1(&mut tensors, &format!("{}.bn.gamma", ns.id))?,
                        beta: take1(&mut tensors, &format!("{}.bn.beta", ns.id))?,
                        running_mean: take1(&mut tensors, &format!("{}.bn.mean", ns.id))?,
                        running_var: take1(&mut tensors, &format!("{}.bn.var", ns.id))?,
                        eps: 1e-5,
                        momentum: 0.1,
                    })
                } else {
                    None
                };
                Op::Conv(Conv2d { w, b, bn, stride: *stride, padding: *padding, relu: *relu })
            }
            OpSpec::Linear { in_channels, spatial, out, relu, bias } => {
                let w = take2(&mut tensors, &format!("{}.w", ns.id))?;
                if w.dim() != (*out, in_channels * spatial) {
                    return Err(Error::Checkpoint(format!(
                        "tensor `{}.w` shape {:?} disagrees with manifest",
                        ns.id,
                        w.dim()
                    )));
                }
                let b = if *bias {
                    Some(take1(&mut tensors, &format!("{}.b", ns.id))?)
                } else {
                    None
                };
                Op::Linear(Linear {
                    w,
                    b,
                    in_channels: *in_channels,
                    spatial: *spatial,
                    relu: *relu,
                })
            }
            OpSpec::Add { relu } => Op::Add { relu: *relu },
            OpSpec::MaxPool { k, stride, padding } => {
                Op::MaxPool { k: *k, stride: *stride, padding: *padding }
            }
            OpSpec::GlobalAvgPool => Op::GlobalAvgPool,
            OpSpec::Flatten => Op::Flatten,
        };
        by_id.insert(ns.id.clone(), i);
        nodes.push(Node { id: ns.id.clone(), op, inputs });
    }
    if let Some(name) = tensors.keys().next() {
        return Err(Error::Checkpoint(format!("unused tensor `{name}` in checkpoint")));
    }
    ModelGraph::new(
        spec.name,
        (spec.input_shape[0], spec.input_shape[1], spec.input_shape[2]),
        spec.classes,
        nodes,
    )
}

//! Model graphs, channel masks and coupling analysis.
//!
//! A [`ModelGraph`] is an ordered list of nodes (conv, linear, add, pooling,
//! flatten) in topological order. From it we derive:
//!
//! * [`LayerNode`] views — one per conv/linear layer, with producer layers
//!   traced through plumbing ops (pools, flatten, elementwise adds);
//! * [`CouplingGroup`]s — sets of layers whose output channels must share a
//!   mask because their outputs meet at an elementwise add. The union is
//!   transitive: identity shortcuts chain add sites together, so e.g. a
//!   residual stem and every block output that feeds the same running
//!   identity path land in one group.
//!
//! Masking is applied to layer *outputs* (after bias and batch norm), which
//! makes a masked channel genuinely silent — equivalent to physically
//! removing the channel, which [`extract_subnetwork`] does.

mod build;
mod checkpoint;
mod forward;

pub use build::*;
pub use checkpoint::{load_graph, save_graph, TensorDir};
pub use forward::{
    backward, forward, logits_of, update_running_stats, BnMode, GradWants, Grads, LayerGrads, Tape,
};

use crate::{Error, Result};
use ndarray::{Array1, Array2, Array4};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Batch norm parameters and frozen statistics for one conv layer.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Array1<f32>,
    pub beta: Array1<f32>,
    pub running_mean: Array1<f32>,
    pub running_var: Array1<f32>,
    pub eps: f32,
    pub momentum: f32,
}

impl BatchNorm {
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

/// Convolution node parameters. `relu` fuses the activation that follows.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: Array4<f32>, // (co, ci, k, k)
    pub b: Option<Array1<f32>>,
    pub bn: Option<BatchNorm>,
    pub stride: usize,
    pub padding: usize,
    pub relu: bool,
}

/// Linear node parameters. The input is a flattened (channels * spatial)
/// feature vector; `spatial` records the per-channel block size so channel
/// masks can be expanded onto feature columns.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Array2<f32>, // (out, in_channels * spatial)
    pub b: Option<Array1<f32>>,
    pub in_channels: usize,
    pub spatial: usize,
    pub relu: bool,
}

/// One graph operation.
#[derive(Debug, Clone)]
pub enum Op {
    Input,
    Conv(Conv2d),
    Linear(Linear),
    /// Elementwise sum of all inputs, optionally followed by ReLU.
    Add { relu: bool },
    MaxPool { k: usize, stride: usize, padding: usize },
    GlobalAvgPool,
    Flatten,
}

impl Op {
    pub fn kind_str(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Conv(_) => "conv",
            Op::Linear(_) => "linear",
            Op::Add { .. } => "add",
            Op::MaxPool { .. } => "maxpool",
            Op::GlobalAvgPool => "gap",
            Op::Flatten => "flatten",
        }
    }

    fn is_layer(&self) -> bool {
        matches!(self, Op::Conv(_) | Op::Linear(_))
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub id: String,
    pub op: Op,
    /// Indices of producer nodes, all strictly smaller than this node's own
    /// index (the node list is topologically ordered).
    pub inputs: Vec<usize>,
}

/// Kind tag for the derived layer view.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv { k: usize, stride: usize, padding: usize },
    Linear,
}

/// Derived per-layer description: what feeds it, whether it may be pruned
/// and which coupling group owns its output channels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerNode {
    pub id: String,
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub prunable: bool,
    /// Producer layer ids; `"input"` when fed by the image itself.
    pub predecessors: Vec<String>,
    /// Coupling group index into [`ModelGraph::groups`], for prunable layers.
    pub group: Option<usize>,
}

/// Layers whose output channels are tied together by elementwise adds and
/// therefore share one mask.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CouplingGroup {
    pub id: usize,
    /// Member layer ids in topological order.
    pub layers: Vec<String>,
    /// Common channel count of every member.
    pub width: usize,
}

/// Binary keep/prune vector over a layer's output channels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelMask {
    pub bits: Vec<u8>,
}

impl ChannelMask {
    pub fn ones(n: usize) -> Self {
        Self { bits: vec![1; n] }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn kept(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    /// Fraction of channels pruned.
    pub fn sparsity(&self) -> f32 {
        if self.bits.is_empty() {
            0.0
        } else {
            1.0 - self.kept() as f32 / self.bits.len() as f32
        }
    }

    /// Indices of kept channels, ascending.
    pub fn kept_indices(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| (b == 1).then_some(i))
            .collect()
    }

    fn check(&self, layer: &str, width: usize) -> Result<()> {
        if self.bits.len() != width {
            return Err(Error::InvalidMask {
                layer: layer.into(),
                reason: format!("mask has {} bits, layer has {width} channels", self.bits.len()),
            });
        }
        if self.bits.iter().any(|&b| b > 1) {
            return Err(Error::InvalidMask {
                layer: layer.into(),
                reason: "mask bits must be 0 or 1".into(),
            });
        }
        if self.kept() == 0 {
            return Err(Error::InvalidMask {
                layer: layer.into(),
                reason: "mask keeps no channels".into(),
            });
        }
        Ok(())
    }
}

/// How the pruning budget is distributed over coupling groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Allocation {
    /// The same fraction of channels is pruned from every group.
    Uniform,
    /// One budget over the concatenation of all group scores.
    Global,
}

impl std::fmt::Display for Allocation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Allocation::Uniform => "uniform",
            Allocation::Global => "global",
        })
    }
}

impl std::str::FromStr for Allocation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Allocation::Uniform),
            "global" => Ok(Allocation::Global),
            other => Err(Error::Config(format!("unknown allocation `{other}`"))),
        }
    }
}

/// A complete set of per-layer masks for one graph at one sparsity level.
///
/// Coupled layers carry bit-identical copies of their group's mask, so the
/// map alone (without the graph) is enough to reproduce the pruned model.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    pub target_sparsity: f32,
    pub allocation: Allocation,
    pub masks: BTreeMap<String, ChannelMask>,
}

#[derive(Serialize, Deserialize)]
struct MaskEntry {
    bits: Vec<u8>,
    sparsity: f32,
}

impl MaskSet {
    /// All-ones masks over every prunable layer.
    pub fn ones(graph: &ModelGraph) -> Self {
        let mut masks = BTreeMap::new();
        for layer in graph.layers() {
            if layer.prunable {
                masks.insert(layer.id.clone(), ChannelMask::ones(layer.out_channels));
            }
        }
        Self { target_sparsity: 0.0, allocation: Allocation::Uniform, masks }
    }

    /// Build from per-group masks, fanning each mask out to every member.
    pub fn from_group_masks(
        graph: &ModelGraph,
        group_masks: &[ChannelMask],
        target_sparsity: f32,
        allocation: Allocation,
    ) -> Result<Self> {
        if group_masks.len() != graph.groups().len() {
            return Err(Error::Config(format!(
                "{} group masks for {} groups",
                group_masks.len(),
                graph.groups().len()
            )));
        }
        let mut masks = BTreeMap::new();
        for group in graph.groups() {
            let mask = &group_masks[group.id];
            mask.check(&format!("group {}", group.id), group.width)?;
            for layer in &group.layers {
                masks.insert(layer.clone(), mask.clone());
            }
        }
        Ok(Self { target_sparsity, allocation, masks })
    }

    pub fn get(&self, layer: &str) -> Option<&ChannelMask> {
        self.masks.get(layer)
    }

    /// Check coverage, widths and coupling consistency against a graph.
    pub fn validate(&self, graph: &ModelGraph) -> Result<()> {
        for id in self.masks.keys() {
            let layer = graph
                .layer(id)
                .ok_or_else(|| Error::UnknownLayer(id.clone()))?;
            if !layer.prunable {
                return Err(Error::InvalidMask {
                    layer: id.clone(),
                    reason: "layer is not prunable".into(),
                });
            }
        }
        for layer in graph.layers() {
            if !layer.prunable {
                continue;
            }
            let mask = self.masks.get(&layer.id).ok_or_else(|| Error::InvalidMask {
                layer: layer.id.clone(),
                reason: "missing mask".into(),
            })?;
            mask.check(&layer.id, layer.out_channels)?;
        }
        for group in graph.groups() {
            let first = &self.masks[&group.layers[0]];
            for other in &group.layers[1..] {
                if self.masks[other] != *first {
                    return Err(Error::InvalidMask {
                        layer: other.clone(),
                        reason: format!(
                            "mask differs from coupled layer `{}`",
                            group.layers[0]
                        ),
                    });
                }
            }
        }
        Ok(())
    }

    /// Serialize as `{layer_id: {bits, sparsity}}` with sorted layer ids.
    pub fn to_json(&self) -> serde_json::Value {
        let map: BTreeMap<&str, MaskEntry> = self
            .masks
            .iter()
            .map(|(id, m)| {
                (id.as_str(), MaskEntry { bits: m.bits.clone(), sparsity: m.sparsity() })
            })
            .collect();
        serde_json::to_value(map).expect("maskset serialization cannot fail")
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.to_json()).expect("maskset serialization cannot fail")
    }

    /// Parse the `{layer_id: {bits, sparsity}}` shape. Target sparsity and
    /// allocation are not part of the wire format; callers that need them
    /// keep them in their run configuration.
    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        let map: BTreeMap<String, MaskEntry> = serde_json::from_value(value.clone())?;
        let mut masks = BTreeMap::new();
        let mut pruned = 0usize;
        let mut total = 0usize;
        for (id, entry) in map {
            let mask = ChannelMask { bits: entry.bits };
            pruned += mask.len() - mask.kept();
            total += mask.len();
            masks.insert(id, mask);
        }
        let target = if total == 0 { 0.0 } else { pruned as f32 / total as f32 };
        Ok(Self { target_sparsity: target, allocation: Allocation::Uniform, masks })
    }

    pub fn write_to(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json_string())?;
        Ok(())
    }

    pub fn read_from(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        Self::from_json(&value)
    }
}

/// The model: nodes in topological order plus derived layer/group views.
#[derive(Debug, Clone)]
pub struct ModelGraph {
    pub name: String,
    /// (channels, height, width) of the expected input.
    pub input_shape: (usize, usize, usize),
    pub classes: usize,
    nodes: Vec<Node>,
    index: BTreeMap<String, usize>,
    layers: Vec<LayerNode>,
    layer_index: BTreeMap<String, usize>,
    groups: Vec<CouplingGroup>,
}

impl ModelGraph {
    /// Assemble a graph from nodes, deriving layer views and coupling
    /// groups. Fails on malformed structure (bad topology, mismatched add
    /// shapes, inconsistent group widths).
    pub fn new(
        name: impl Into<String>,
        input_shape: (usize, usize, usize),
        classes: usize,
        nodes: Vec<Node>,
    ) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (i, node) in nodes.iter().enumerate() {
            if index.insert(node.id.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate node id `{}`", node.id)));
            }
            for &inp in &node.inputs {
                if inp >= i {
                    return Err(Error::Config(format!(
                        "node `{}` consumes node {inp} which does not precede it",
                        node.id
                    )));
                }
            }
            match (&node.op, node.inputs.len()) {
                (Op::Input, 0) => {}
                (Op::Input, _) => {
                    return Err(Error::Config("input node takes no inputs".into()))
                }
                (Op::Add { .. }, n) if n >= 2 => {}
                (Op::Add { .. }, _) => {
                    return Err(Error::Config("add node needs at least two inputs".into()))
                }
                (_, 1) => {}
                (op, n) => {
                    return Err(Error::Config(format!(
                        "{} node `{}` has {n} inputs",
                        op.kind_str(),
                        node.id
                    )))
                }
            }
        }
        if !matches!(nodes.first().map(|n| &n.op), Some(Op::Input)) {
            return Err(Error::Config("first node must be the input".into()));
        }

        let mut graph = Self {
            name: name.into(),
            input_shape,
            classes,
            nodes,
            index,
            layers: Vec::new(),
            layer_index: BTreeMap::new(),
            groups: Vec::new(),
        };
        graph.derive_layers()?;
        graph.shapes()?; // validates shape consistency as a side effect
        Ok(graph)
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, idx: usize) -> &Node {
        &self.nodes[idx]
    }

    pub fn node_mut(&mut self, idx: usize) -> &mut Node {
        &mut self.nodes[idx]
    }

    pub fn node_by_id(&self, id: &str) -> Option<&Node> {
        self.index.get(id).map(|&i| &self.nodes[i])
    }

    pub fn node_by_id_mut(&mut self, id: &str) -> Option<&mut Node> {
        if let Some(&i) = self.index.get(id) {
            Some(&mut self.nodes[i])
        } else {
            None
        }
    }

    /// Layer views (convs and linears) in topological order.
    pub fn layers(&self) -> &[LayerNode] {
        &self.layers
    }

    pub fn layer(&self, id: &str) -> Option<&LayerNode> {
        self.layer_index.get(id).map(|&i| &self.layers[i])
    }

    /// Coupling groups in topological order of their first member.
    pub fn groups(&self) -> &[CouplingGroup] {
        &self.groups
    }

    /// The coupling group whose mask gates this layer's *input* channels,
    /// or `None` when the layer is fed by the raw input or a non-prunable
    /// producer.
    pub fn input_group(&self, layer_id: &str) -> Option<usize> {
        let layer = self.layer(layer_id)?;
        let first = layer.predecessors.first()?;
        if first == "input" {
            return None;
        }
        self.layer(first).and_then(|l| l.group)
    }

    /// Per-node output shapes (C, H, W), batch-independent.
    pub fn shapes(&self) -> Result<Vec<(usize, usize, usize)>> {
        let mut shapes: Vec<(usize, usize, usize)> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let shape = match &node.op {
                Op::Input => self.input_shape,
                Op::Conv(c) => {
                    let (ci, h, w) = shapes[node.inputs[0]];
                    let (co, ci_w, k, _) = c.w.dim();
                    if ci != ci_w {
                        return Err(Error::Shape(format!(
                            "`{}` expects {ci_w} input channels, got {ci}",
                            node.id
                        )));
                    }
                    let oh = conv_out(h, k, c.stride, c.padding, &node.id)?;
                    let ow = conv_out(w, k, c.stride, c.padding, &node.id)?;
                    (co, oh, ow)
                }
                Op::Linear(l) => {
                    let (ci, h, w) = shapes[node.inputs[0]];
                    let feats = ci * h * w;
                    if feats != l.w.ncols() {
                        return Err(Error::Shape(format!(
                            "`{}` expects {} input features, got {feats}",
                            node.id,
                            l.w.ncols()
                        )));
                    }
                    (l.w.nrows(), 1, 1)
                }
                Op::Add { .. } => {
                    let first = shapes[node.inputs[0]];
                    for &i in &node.inputs[1..] {
                        if shapes[i] != first {
                            return Err(Error::Shape(format!(
                                "add `{}` mixes shapes {:?} and {:?}",
                                node.id, first, shapes[i]
                            )));
                        }
                    }
                    first
                }
                Op::MaxPool { k, stride, padding } => {
                    let (c, h, w) = shapes[node.inputs[0]];
                    (
                        c,
                        conv_out(h, *k, *stride, *padding, &node.id)?,
                        conv_out(w, *k, *stride, *padding, &node.id)?,
                    )
                }
                Op::GlobalAvgPool => {
                    let (c, _, _) = shapes[node.inputs[0]];
                    (c, 1, 1)
                }
                Op::Flatten => {
                    let (c, h, w) = shapes[node.inputs[0]];
                    (c * h * w, 1, 1)
                }
            };
            shapes.push(shape);
        }
        Ok(shapes)
    }

    /// Trainable parameter count (weights, biases, batch-norm affine).
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        for node in &self.nodes {
            match &node.op {
                Op::Conv(c) => {
                    n += c.w.len();
                    n += c.b.as_ref().map_or(0, |b| b.len());
                    n += c.bn.as_ref().map_or(0, |bn| bn.gamma.len() + bn.beta.len());
                }
                Op::Linear(l) => {
                    n += l.w.len();
                    n += l.b.as_ref().map_or(0, |b| b.len());
                }
                _ => {}
            }
        }
        n
    }

    /// Visit every trainable tensor as `("{id}.w" | "{id}.b" |
    /// "{id}.bn.gamma" | "{id}.bn.beta", view)` in node order. Running
    /// batch-norm statistics are bookkeeping, not parameters, and are
    /// skipped.
    pub fn for_each_param(&self, f: &mut dyn FnMut(&str, ndarray::ArrayViewD<f32>)) {
        for node in &self.nodes {
            match &node.op {
                Op::Conv(c) => {
                    f(&format!("{}.w", node.id), c.w.view().into_dyn());
                    if let Some(b) = &c.b {
                        f(&format!("{}.b", node.id), b.view().into_dyn());
                    }
                    if let Some(bn) = &c.bn {
                        f(&format!("{}.bn.gamma", node.id), bn.gamma.view().into_dyn());
                        f(&format!("{}.bn.beta", node.id), bn.beta.view().into_dyn());
                    }
                }
                Op::Linear(l) => {
                    f(&format!("{}.w", node.id), l.w.view().into_dyn());
                    if let Some(b) = &l.b {
                        f(&format!("{}.b", node.id), b.view().into_dyn());
                    }
                }
                _ => {}
            }
        }
    }

    /// Mutable variant of [`Self::for_each_param`], same names and order.
    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, ndarray::ArrayViewMutD<f32>)) {
        for node in &mut self.nodes {
            match &mut node.op {
                Op::Conv(c) => {
                    f(&format!("{}.w", node.id), c.w.view_mut().into_dyn());
                    if let Some(b) = c.b.as_mut() {
                        f(&format!("{}.b", node.id), b.view_mut().into_dyn());
                    }
                    if let Some(bn) = c.bn.as_mut() {
                        f(&format!("{}.bn.gamma", node.id), bn.gamma.view_mut().into_dyn());
                        f(&format!("{}.bn.beta", node.id), bn.beta.view_mut().into_dyn());
                    }
                }
                Op::Linear(l) => {
                    f(&format!("{}.w", node.id), l.w.view_mut().into_dyn());
                    if let Some(b) = l.b.as_mut() {
                        f(&format!("{}.b", node.id), b.view_mut().into_dyn());
                    }
                }
                _ => {}
            }
        }
    }

    /// Parameter count of the subnetwork a mask set selects, without
    /// materializing it: kept-out x kept-in slices of each layer.
    pub fn param_count_masked(&self, masks: &MaskSet) -> Result<usize> {
        masks.validate(self)?;
        let mut n = 0usize;
        for layer in &self.layers {
            let kept_out = match masks.get(&layer.id) {
                Some(m) => m.kept(),
                None => layer.out_channels,
            };
            let kept_in = self.kept_in_channels(layer, masks);
            let node = self.node_by_id(&layer.id).unwrap();
            match &node.op {
                Op::Conv(c) => {
                    let (_, _, k, _) = c.w.dim();
                    n += kept_out * kept_in * k * k;
                    if c.b.is_some() {
                        n += kept_out;
                    }
                    if c.bn.is_some() {
                        n += 2 * kept_out;
                    }
                }
                Op::Linear(l) => {
                    n += kept_out * kept_in * l.spatial;
                    if l.b.is_some() {
                        n += kept_out;
                    }
                }
                _ => unreachable!("layer view points at a non-layer node"),
            }
        }
        Ok(n)
    }

    /// Kept input-channel count of a layer under a mask set.
    pub fn kept_in_channels(&self, layer: &LayerNode, masks: &MaskSet) -> usize {
        match self.input_group(&layer.id) {
            Some(g) => {
                let rep = &self.groups[g].layers[0];
                masks.get(rep).map_or(self.groups[g].width, |m| m.kept())
            }
            None => layer.in_channels,
        }
    }

    /// Derive layer views and coupling groups.
    fn derive_layers(&mut self) -> Result<()> {
        // Producer layers per node, traced through plumbing ops. usize::MAX
        // stands for the raw input.
        const INPUT: usize = usize::MAX;
        let mut producers: Vec<Vec<usize>> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let prod = match &node.op {
                Op::Input => vec![INPUT],
                Op::Conv(_) | Op::Linear(_) => vec![i],
                _ => {
                    let mut set: Vec<usize> = Vec::new();
                    for &inp in &node.inputs {
                        for &p in &producers[inp] {
                            if !set.contains(&p) {
                                set.push(p);
                            }
                        }
                    }
                    set.sort_unstable();
                    set
                }
            };
            producers.push(prod);
        }

        // A layer's own producers come from its single input edge.
        let layer_nodes: Vec<usize> = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.op.is_layer())
            .map(|(i, _)| i)
            .collect();
        if layer_nodes.is_empty() {
            return Err(Error::Config("graph contains no conv or linear layers".into()));
        }
        // The classifier is whatever produces the final node's features.
        let classifier: Vec<usize> = producers[self.nodes.len() - 1].clone();

        // Union-find over layer node indices for add-site coupling.
        let mut parent: BTreeMap<usize, usize> =
            layer_nodes.iter().map(|&i| (i, i)).collect();
        fn find(parent: &mut BTreeMap<usize, usize>, mut x: usize) -> usize {
            while parent[&x] != x {
                let up = parent[&parent[&x]];
                parent.insert(x, up);
                x = up;
            }
            x
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Add { .. } = node.op {
                let site: Vec<usize> = producers[i]
                    .iter()
                    .copied()
                    .filter(|&p| p != INPUT)
                    .collect();
                if site.len() != producers[i].len() {
                    return Err(Error::Config(format!(
                        "add `{}` sums the raw input; unsupported",
                        node.id
                    )));
                }
                for &p in &site[1..] {
                    let a = find(&mut parent, site[0]);
                    let b = find(&mut parent, p);
                    if a != b {
                        let (lo, hi) = (a.min(b), a.max(b));
                        parent.insert(hi, lo);
                    }
                }
            }
        }

        // Prunable = conv/linear that is not (part of) the classifier.
        let is_classifier = |i: usize| classifier.contains(&i);

        // Collect groups of prunable layers keyed by root, ordered by first
        // member.
        let mut root_of: BTreeMap<usize, usize> = BTreeMap::new();
        for &i in &layer_nodes {
            let r = find(&mut parent, i);
            root_of.insert(i, r);
        }
        let mut group_order: Vec<usize> = Vec::new();
        let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &i in &layer_nodes {
            if is_classifier(i) {
                continue;
            }
            let r = root_of[&i];
            members.entry(r).or_insert_with(|| {
                group_order.push(r);
                Vec::new()
            });
            members.get_mut(&r).unwrap().push(i);
        }
        group_order.sort_by_key(|r| members[r][0]);

        // A classifier layer must not be coupled to prunable layers; that
        // would force pruning of the output head.
        for &i in &layer_nodes {
            if is_classifier(i) && members.contains_key(&root_of[&i]) {
                return Err(Error::Config(format!(
                    "classifier `{}` shares an add site with prunable layers",
                    self.nodes[i].id
                )));
            }
        }

        let mut groups = Vec::new();
        let mut group_of: BTreeMap<usize, usize> = BTreeMap::new();
        for (gid, &root) in group_order.iter().enumerate() {
            let mem = &members[&root];
            let width = self.out_channels_of(mem[0]);
            for &m in mem {
                if self.out_channels_of(m) != width {
                    return Err(Error::Config(format!(
                        "coupled layers `{}` and `{}` have different widths",
                        self.nodes[mem[0]].id, self.nodes[m].id
                    )));
                }
                group_of.insert(m, gid);
            }
            groups.push(CouplingGroup {
                id: gid,
                layers: mem.iter().map(|&m| self.nodes[m].id.clone()).collect(),
                width,
            });
        }

        let mut layers = Vec::new();
        let mut layer_index = BTreeMap::new();
        for &i in &layer_nodes {
            let node = &self.nodes[i];
            let preds: Vec<String> = producers[node.inputs[0]]
                .iter()
                .map(|&p| {
                    if p == INPUT {
                        "input".to_string()
                    } else {
                        self.nodes[p].id.clone()
                    }
                })
                .collect();
            let (kind, in_channels, out_channels) = match &node.op {
                Op::Conv(c) => {
                    let (co, ci, k, _) = c.w.dim();
                    (LayerKind::Conv { k, stride: c.stride, padding: c.padding }, ci, co)
                }
                Op::Linear(l) => (LayerKind::Linear, l.in_channels, l.w.nrows()),
                _ => unreachable!(),
            };
            layer_index.insert(node.id.clone(), layers.len());
            layers.push(LayerNode {
                id: node.id.clone(),
                kind,
                in_channels,
                out_channels,
                prunable: !is_classifier(i),
                predecessors: preds,
                group: group_of.get(&i).copied(),
            });
        }

        self.layers = layers;
        self.layer_index = layer_index;
        self.groups = groups;
        Ok(())
    }

    fn out_channels_of(&self, node_idx: usize) -> usize {
        match &self.nodes[node_idx].op {
            Op::Conv(c) => c.w.dim().0,
            Op::Linear(l) => l.w.nrows(),
            _ => unreachable!("only layers have output channels"),
        }
    }
}

fn conv_out(input: usize, k: usize, stride: usize, padding: usize, id: &str) -> Result<usize> {
    let padded = input + 2 * padding;
    if padded < k {
        return Err(Error::Shape(format!(
            "`{id}`: window {k} exceeds padded extent {padded}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// Multiply masks into the stored weights: each prunable layer's kernel is
/// scaled by its output mask and by the mask of its producer group on the
/// input side. Bias and batch-norm affine terms of masked output channels
/// are zeroed as well, so masked channels stay silent under bias and batch
/// norm — matching what the masked forward pass and [`extract_subnetwork`]
/// compute.
pub fn apply_masks(graph: &ModelGraph, masks: &MaskSet) -> Result<ModelGraph> {
    masks.validate(graph)?;
    let mut out = graph.clone();
    let layer_ids: Vec<String> = graph.layers().iter().map(|l| l.id.clone()).collect();
    for id in &layer_ids {
        let out_mask = masks.get(id).cloned();
        let in_mask = graph
            .input_group(id)
            .map(|g| masks.masks[&graph.groups()[g].layers[0]].clone());
        let node = out.node_by_id_mut(id).unwrap();
        match &mut node.op {
            Op::Conv(c) => {
                if let Some(m) = &out_mask {
                    for (j, &bit) in m.bits.iter().enumerate() {
                        if bit == 0 {
                            c.w.index_axis_mut(ndarray::Axis(0), j).fill(0.0);
                            if let Some(b) = c.b.as_mut() {
                                b[j] = 0.0;
                            }
                            if let Some(bn) = c.bn.as_mut() {
                                bn.gamma[j] = 0.0;
                                bn.beta[j] = 0.0;
                            }
                        }
                    }
                }
                if let Some(m) = &in_mask {
                    for (i, &bit) in m.bits.iter().enumerate() {
                        if bit == 0 {
                            c.w.index_axis_mut(ndarray::Axis(1), i).fill(0.0);
                        }
                    }
                }
            }
            Op::Linear(l) => {
                if let Some(m) = &out_mask {
                    for (j, &bit) in m.bits.iter().enumerate() {
                        if bit == 0 {
                            l.w.index_axis_mut(ndarray::Axis(0), j).fill(0.0);
                            if let Some(b) = l.b.as_mut() {
                                b[j] = 0.0;
                            }
                        }
                    }
                }
                if let Some(m) = &in_mask {
                    for (i, &bit) in m.bits.iter().enumerate() {
                        if bit == 0 {
                            for s in 0..l.spatial {
                                l.w.index_axis_mut(ndarray::Axis(1), i * l.spatial + s)
                                    .fill(0.0);
                            }
                        }
                    }
                }
            }
            _ => unreachable!(),
        }
    }
    Ok(out)
}

/// Physically remove pruned channels, producing a smaller graph whose
/// forward pass matches the masked forward of the original to float
/// accuracy.
pub fn extract_subnetwork(graph: &ModelGraph, masks: &MaskSet) -> Result<ModelGraph> {
    masks.validate(graph)?;
    let mut nodes = Vec::with_capacity(graph.nodes().len());
    for node in graph.nodes() {
        let op = match &node.op {
            Op::Input => Op::Input,
            Op::Add { relu } => Op::Add { relu: *relu },
            Op::MaxPool { k, stride, padding } => {
                Op::MaxPool { k: *k, stride: *stride, padding: *padding }
            }
            Op::GlobalAvgPool => Op::GlobalAvgPool,
            Op::Flatten => Op::Flatten,
            Op::Conv(c) => {
                let layer = graph.layer(&node.id).unwrap();
                let keep_out: Vec<usize> = match masks.get(&node.id) {
                    Some(m) => m.kept_indices(),
                    None => (0..layer.out_channels).collect(),
                };
                let keep_in: Vec<usize> = match graph.input_group(&node.id) {
                    Some(g) => masks.masks[&graph.groups()[g].layers[0]].kept_indices(),
                    None => (0..layer.in_channels).collect(),
                };
                let w = c.w.select(ndarray::Axis(0), &keep_out);
                let w = w.select(ndarray::Axis(1), &keep_in);
                Op::Conv(Conv2d {
                    w,
                    b: c.b.as_ref().map(|b| b.select(ndarray::Axis(0), &keep_out)),
                    bn: c.bn.as_ref().map(|bn| BatchNorm {
                        gamma: bn.gamma.select(ndarray::Axis(0), &keep_out),
                        beta: bn.beta.select(ndarray::Axis(0), &keep_out),
                        running_mean: bn.running_mean.select(ndarray::Axis(0), &keep_out),
                        running_var: bn.running_var.select(ndarray::Axis(0), &keep_out),
                        eps: bn.eps,
                        momentum: bn.momentum,
                    }),
                    stride: c.stride,
                    padding: c.padding,
                    relu: c.relu,
                })
            }
            Op::Linear(l) => {
                let keep_out: Vec<usize> = match masks.get(&node.id) {
                    Some(m) => m.kept_indices(),
                    None => (0..l.w.nrows()).collect(),
                };
                let (keep_cols, kept_in) = match graph.input_group(&node.id) {
                    Some(g) => {
                        let kept = masks.masks[&graph.groups()[g].layers[0]].kept_indices();
                        let mut cols = Vec::with_capacity(kept.len() * l.spatial);
                        for &c in &kept {
                            for s in 0..l.spatial {
                                cols.push(c * l.spatial + s);
                            }
                        }
                        (cols, kept.len())
                    }
                    None => ((0..l.w.ncols()).collect(), l.in_channels),
                };
                let w = l.w.select(ndarray::Axis(0), &keep_out);
                let w = w.select(ndarray::Axis(1), &keep_cols);
                Op::Linear(Linear {
                    w,
                    b: l.b.as_ref().map(|b| b.select(ndarray::Axis(0), &keep_out)),
                    in_channels: kept_in,
                    spatial: l.spatial,
                    relu: l.relu,
                })
            }
        };
        nodes.push(Node { id: node.id.clone(), op, inputs: node.inputs.clone() });
    }
    ModelGraph::new(
        format!("{}-pruned", graph.name),
        graph.input_shape,
        graph.classes,
        nodes,
    )
}

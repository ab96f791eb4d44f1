//! The recurrent mask generator.
//!
//! A shared LSTM cell walks the network's coupling groups in topological
//! order. At each step it consumes a fixed-length summary of the group's
//! (in-channel-masked) weights, and a per-group linear head turns the hidden
//! state into channel importance scores. Scores are binarized into keep/prune
//! masks under a uniform or global budget; gradients cross the binarization
//! via straight-through estimation. The initial hidden state comes from the
//! visual-prompt encoder, which is how the prompt steers the masks.

mod lstm;

pub use lstm::{LstmCell, LstmStepCache, LstmStepGrads};

use crate::netgraph::{Allocation, ChannelMask, MaskSet, ModelGraph, Op, TensorDir};
use crate::prompt::{EncoderTape, PromptEncoder, VisualPrompt};
use crate::{Error, Result};
use ndarray::{Array1, Array2, Array3, ArrayD, ArrayView4, ArrayViewD, ArrayViewMutD, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

const CNN_KERNEL: usize = 5;
const CNN_STRIDE: usize = 2;
const CNN_PAD: usize = 2;

/// How the LSTM cell state starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellInit {
    /// c0 is a trainable vector.
    Learned,
    /// c0 is all zeros.
    Zero,
}

/// Generator ablation switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Prompt-conditioned LSTM over weight summaries.
    Full,
    /// h0 is a learned constant; the prompt no longer conditions scores.
    NoPrompt,
    /// The LSTM input is zeros; weight statistics no longer condition scores.
    NoWeights,
    /// Recurrence replaced by a two-layer MLP on [summary, prompt embedding].
    MlpVariant,
    /// Recurrence replaced by a strided 1-D conv over the summary.
    CnnVariant,
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Ablation::Full => "full",
            Ablation::NoPrompt => "no_prompt",
            Ablation::NoWeights => "no_weights",
            Ablation::MlpVariant => "mlp_variant",
            Ablation::CnnVariant => "cnn_variant",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "full" => Ablation::Full,
            "no_prompt" => Ablation::NoPrompt,
            "no_weights" => Ablation::NoWeights,
            "mlp_variant" => Ablation::MlpVariant,
            "cnn_variant" => Ablation::CnnVariant,
            other => return Err(Error::Config(format!("unknown ablation `{other}`"))),
        })
    }
}

/// Generator configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HypernetConfig {
    pub hidden_size: usize,
    /// Zero-padding length for weight summaries; must cover the widest
    /// prunable layer.
    pub max_channels: usize,
    pub allocation: Allocation,
    pub cell_init: CellInit,
    pub ablation: Ablation,
}

impl HypernetConfig {
    /// Defaults (hidden 64, learned cell state, full generator) sized for a
    /// graph.
    pub fn for_graph(graph: &ModelGraph, allocation: Allocation) -> Self {
        let max_channels =
            graph.groups().iter().map(|g| g.width).max().unwrap_or(1);
        Self {
            hidden_size: 64,
            max_channels,
            allocation,
            cell_init: CellInit::Learned,
            ablation: Ablation::Full,
        }
    }

    fn validate(&self, graph: &ModelGraph) -> Result<()> {
        if self.hidden_size == 0 {
            return Err(Error::Config("hidden_size must be positive".into()));
        }
        for g in graph.groups() {
            if g.width > self.max_channels {
                return Err(Error::Config(format!(
                    "max_channels {} smaller than group {} width {}",
                    self.max_channels, g.id, g.width
                )));
            }
        }
        Ok(())
    }
}

/// Per-group linear head mapping hidden state to channel scores.
#[derive(Debug, Clone)]
pub struct GroupHead {
    /// (group width, hidden)
    pub w: Array2<f32>,
    pub b: Array1<f32>,
}

/// Two-layer MLP standing in for the LSTM in the `mlp_variant` ablation.
#[derive(Debug, Clone)]
pub struct MlpCell {
    /// (hidden, max_channels + hidden)
    pub w1: Array2<f32>,
    pub b1: Array1<f32>,
    /// (hidden, hidden)
    pub w2: Array2<f32>,
    pub b2: Array1<f32>,
}

/// Strided 1-D conv standing in for the LSTM in the `cnn_variant` ablation.
#[derive(Debug, Clone)]
pub struct ConvCell {
    /// (hidden, kernel)
    pub w: Array2<f32>,
    pub b: Array1<f32>,
}

/// All trainable generator parameters. Only the pieces the configured
/// ablation uses are allocated.
#[derive(Debug, Clone)]
pub struct HypernetState {
    pub config: HypernetConfig,
    pub lstm: Option<LstmCell>,
    pub mlp: Option<MlpCell>,
    pub cnn: Option<ConvCell>,
    /// One head per coupling group, indexed by group id; coupled layers
    /// share their group's head.
    pub heads: Vec<GroupHead>,
    pub encoder: Option<PromptEncoder>,
    /// Trainable initial cell state (cell_init = learned).
    pub cell0: Option<Array1<f32>>,
    /// Trainable initial hidden state (ablation = no_prompt).
    pub h0: Option<Array1<f32>>,
}

impl HypernetState {
    pub fn new(graph: &ModelGraph, config: HypernetConfig, seed: u64) -> Result<Self> {
        config.validate(graph)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hsz = config.hidden_size;
        let bound = 1.0 / (hsz as f32).sqrt();

        let use_lstm = !matches!(config.ablation, Ablation::MlpVariant | Ablation::CnnVariant);
        let lstm = use_lstm.then(|| LstmCell::new(&mut rng, config.max_channels, hsz));
        let mlp = matches!(config.ablation, Ablation::MlpVariant).then(|| {
            let din = config.max_channels + hsz;
            let b1 = 1.0 / (din as f32).sqrt();
            MlpCell {
                w1: Array2::from_shape_fn((hsz, din), |_| rng.random_range(-b1..b1)),
                b1: Array1::zeros(hsz),
                w2: Array2::from_shape_fn((hsz, hsz), |_| rng.random_range(-bound..bound)),
                b2: Array1::zeros(hsz),
            }
        });
        let cnn = matches!(config.ablation, Ablation::CnnVariant).then(|| {
            let bk = 1.0 / (CNN_KERNEL as f32).sqrt();
            ConvCell {
                w: Array2::from_shape_fn((hsz, CNN_KERNEL), |_| rng.random_range(-bk..bk)),
                b: Array1::zeros(hsz),
            }
        });
        let heads = graph
            .groups()
            .iter()
            .map(|g| GroupHead {
                w: Array2::from_shape_fn((g.width, hsz), |_| rng.random_range(-bound..bound)),
                b: crate::nn::uniform_init(&mut rng, g.width, bound),
            })
            .collect();
        let needs_encoder =
            !matches!(config.ablation, Ablation::NoPrompt | Ablation::CnnVariant);
        let encoder = needs_encoder
            .then(|| PromptEncoder::new(&mut rng, graph.input_shape.0, hsz));
        let cell0 = (use_lstm && config.cell_init == CellInit::Learned)
            .then(|| crate::nn::uniform_init(&mut rng, hsz, bound));
        let h0 = matches!(config.ablation, Ablation::NoPrompt)
            .then(|| crate::nn::uniform_init(&mut rng, hsz, bound));
        Ok(Self { config, lstm, mlp, cnn, heads, encoder, cell0, h0 })
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |_, v| n += v.len());
        n
    }

    /// Visit every trainable array with a stable name, in a fixed order.
    pub fn for_each_param(&self, f: &mut dyn FnMut(&str, ArrayViewD<f32>)) {
        if let Some(l) = &self.lstm {
            f("lstm.wx", l.wx.view().into_dyn());
            f("lstm.wh", l.wh.view().into_dyn());
            f("lstm.b", l.b.view().into_dyn());
        }
        if let Some(m) = &self.mlp {
            f("mlp.w1", m.w1.view().into_dyn());
            f("mlp.b1", m.b1.view().into_dyn());
            f("mlp.w2", m.w2.view().into_dyn());
            f("mlp.b2", m.b2.view().into_dyn());
        }
        if let Some(c) = &self.cnn {
            f("cnn.w", c.w.view().into_dyn());
            f("cnn.b", c.b.view().into_dyn());
        }
        for (gid, h) in self.heads.iter().enumerate() {
            f(&format!("head.{gid}.w"), h.w.view().into_dyn());
            f(&format!("head.{gid}.b"), h.b.view().into_dyn());
        }
        if let Some(e) = &self.encoder {
            f("encoder.w1", e.w1.view().into_dyn());
            f("encoder.b1", e.b1.view().into_dyn());
            f("encoder.w2", e.w2.view().into_dyn());
            f("encoder.b2", e.b2.view().into_dyn());
            f("encoder.w3", e.w3.view().into_dyn());
            f("encoder.b3", e.b3.view().into_dyn());
        }
        if let Some(c0) = &self.cell0 {
            f("cell0", c0.view().into_dyn());
        }
        if let Some(h0) = &self.h0 {
            f("h0", h0.view().into_dyn());
        }
    }

    /// Mutable twin of [`Self::for_each_param`].
    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<f32>)) {
        if let Some(l) = &mut self.lstm {
            f("lstm.wx", l.wx.view_mut().into_dyn());
            f("lstm.wh", l.wh.view_mut().into_dyn());
            f("lstm.b", l.b.view_mut().into_dyn());
        }
        if let Some(m) = &mut self.mlp {
            f("mlp.w1", m.w1.view_mut().into_dyn());
            f("mlp.b1", m.b1.view_mut().into_dyn());
            f("mlp.w2", m.w2.view_mut().into_dyn());
            f("mlp.b2", m.b2.view_mut().into_dyn());
        }
        if let Some(c) = &mut self.cnn {
            f("cnn.w", c.w.view_mut().into_dyn());
            f("cnn.b", c.b.view_mut().into_dyn());
        }
        for (gid, h) in self.heads.iter_mut().enumerate() {
            f(&format!("head.{gid}.w"), h.w.view_mut().into_dyn());
            f(&format!("head.{gid}.b"), h.b.view_mut().into_dyn());
        }
        if let Some(e) = &mut self.encoder {
            f("encoder.w1", e.w1.view_mut().into_dyn());
            f("encoder.b1", e.b1.view_mut().into_dyn());
            f("encoder.w2", e.w2.view_mut().into_dyn());
            f("encoder.b2", e.b2.view_mut().into_dyn());
            f("encoder.w3", e.w3.view_mut().into_dyn());
            f("encoder.b3", e.b3.view_mut().into_dyn());
        }
        if let Some(c0) = &mut self.cell0 {
            f("cell0", c0.view_mut().into_dyn());
        }
        if let Some(h0) = &mut self.h0 {
            f("h0", h0.view_mut().into_dyn());
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "component": "hypernet",
            "config": self.config,
            "head_widths": self.heads.iter().map(|h| h.w.dim().0).collect::<Vec<_>>(),
        });
        let mut tensors = Vec::new();
        self.for_each_param(&mut |name, v| tensors.push((name.to_string(), v.to_owned())));
        TensorDir::save(dir, meta, &tensors)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (meta, mut tensors) = TensorDir::load(dir)?;
        #[derive(Deserialize)]
        struct Meta {
            config: HypernetConfig,
            head_widths: Vec<usize>,
        }
        let m: Meta = serde_json::from_value(meta)?;
        let mut take = |name: &str| -> Result<ArrayD<f32>> {
            tensors
                .remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("generator checkpoint missing `{name}`")))
        };
        fn fix<D: ndarray::Dimension>(a: ArrayD<f32>) -> Result<ndarray::Array<f32, D>> {
            a.into_dimensionality::<D>().map_err(|e| Error::Checkpoint(e.to_string()))
        }
        let config = m.config;
        let use_lstm = !matches!(config.ablation, Ablation::MlpVariant | Ablation::CnnVariant);
        let lstm = if use_lstm {
            Some(LstmCell {
                wx: fix(take("lstm.wx")?)?,
                wh: fix(take("lstm.wh")?)?,
                b: fix(take("lstm.b")?)?,
            })
        } else {
            None
        };
        let mlp = if matches!(config.ablation, Ablation::MlpVariant) {
            Some(MlpCell {
                w1: fix(take("mlp.w1")?)?,
                b1: fix(take("mlp.b1")?)?,
                w2: fix(take("mlp.w2")?)?,
                b2: fix(take("mlp.b2")?)?,
            })
        } else {
            None
        };
        let cnn = if matches!(config.ablation, Ablation::CnnVariant) {
            Some(ConvCell { w: fix(take("cnn.w")?)?, b: fix(take("cnn.b")?)? })
        } else {
            None
        };
        let mut heads = Vec::new();
        for gid in 0..m.head_widths.len() {
            heads.push(GroupHead {
                w: fix(take(&format!("head.{gid}.w"))?)?,
                b: fix(take(&format!("head.{gid}.b"))?)?,
            });
        }
        let needs_encoder =
            !matches!(config.ablation, Ablation::NoPrompt | Ablation::CnnVariant);
        let encoder = if needs_encoder {
            Some(PromptEncoder {
                w1: fix(take("encoder.w1")?)?,
                b1: fix(take("encoder.b1")?)?,
                w2: fix(take("encoder.w2")?)?,
                b2: fix(take("encoder.b2")?)?,
                w3: fix(take("encoder.w3")?)?,
                b3: fix(take("encoder.b3")?)?,
            })
        } else {
            None
        };
        let cell0 = if use_lstm && config.cell_init == CellInit::Learned {
            Some(fix(take("cell0")?)?)
        } else {
            None
        };
        let h0 = if matches!(config.ablation, Ablation::NoPrompt) {
            Some(fix(take("h0")?)?)
        } else {
            None
        };
        Ok(Self { config, lstm, mlp, cnn, heads, encoder, cell0, h0 })
    }
}

/// Fixed-length statistic of one layer's weights.
#[derive(Debug, Clone)]
pub struct WeightSummary {
    pub layer_id: String,
    /// Length `max_channels`; entries beyond the layer's out_channels are 0.
    pub vector: Array1<f32>,
}

/// Channel importance scores for one coupling group (keyed by its
/// representative layer).
#[derive(Debug, Clone)]
pub struct ChannelScores {
    pub layer_id: String,
    pub values: Array1<f32>,
}

/// Mean of each out-channel's weights over all in-channel and kernel
/// entries, zero-padded to `max_channels`. Pruned-in channels are expected
/// to be zeroed *before* the call, and the mean divides by the full
/// C_I*K*K count, so upstream pruning visibly lowers the summary.
pub fn summarize_weights(
    layer_id: &str,
    w: ArrayView4<f32>,
    max_channels: usize,
) -> WeightSummary {
    let (co, ci, kh, kw) = w.dim();
    let denom = (ci * kh * kw) as f64;
    let mut vector = Array1::<f32>::zeros(max_channels);
    for c in 0..co {
        let s: f64 = w.index_axis(Axis(0), c).iter().map(|&v| v as f64).sum();
        vector[c] = (s / denom) as f32;
    }
    WeightSummary { layer_id: layer_id.to_string(), vector }
}

/// Keep the `keep_k` highest-scoring channels (ties keep the lower index).
pub fn binarize(scores: &ChannelScores, keep_k: usize) -> Result<ChannelMask> {
    let n = scores.values.len();
    if keep_k == 0 || keep_k > n {
        return Err(Error::Config(format!(
            "keep_k {keep_k} out of range for {n} channels in {}",
            scores.layer_id
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        scores.values[b].total_cmp(&scores.values[a]).then(a.cmp(&b))
    });
    let mut bits = vec![0u8; n];
    for &i in order.iter().take(keep_k) {
        bits[i] = 1;
    }
    Ok(ChannelMask { bits })
}

/// Straight-through gradient of [`binarize`]: the incoming per-bit gradient
/// passes to the scores unchanged.
pub fn binarize_backward(dbits: &Array1<f32>) -> Array1<f32> {
    dbits.clone()
}

/// Decide how many channels each group keeps at sparsity `s`.
///
/// Uniform prunes floor(s * width) from every group. Global pools all scores
/// and prunes the floor(s * total) smallest anywhere, except that no group
/// may lose its last channel; a blocked pruning falls through to the next
/// smallest score.
pub fn allocate_budget(
    all_scores: &[ChannelScores],
    s: f32,
    allocation: Allocation,
) -> Result<BTreeMap<String, usize>> {
    if !(s > 0.0 && s < 1.0) {
        return Err(Error::Config(format!("sparsity {s} outside (0, 1)")));
    }
    let mut keeps = BTreeMap::new();
    match allocation {
        Allocation::Uniform => {
            for sc in all_scores {
                let w = sc.values.len();
                let pruned = (s as f64 * w as f64).floor() as usize;
                keeps.insert(sc.layer_id.clone(), w - pruned);
            }
        }
        Allocation::Global => {
            let total: usize = all_scores.iter().map(|sc| sc.values.len()).sum();
            let budget = (s as f64 * total as f64).floor() as usize;
            // (score, group position, channel) — ascending score; ties
            // prune later groups and higher channels first, mirroring the
            // lower-index keep preference of binarize.
            let mut pool: Vec<(f32, usize, usize)> = Vec::with_capacity(total);
            for (gi, sc) in all_scores.iter().enumerate() {
                for (ci, &v) in sc.values.iter().enumerate() {
                    pool.push((v, gi, ci));
                }
            }
            pool.sort_by(|a, b| {
                a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)).then(b.2.cmp(&a.2))
            });
            let mut pruned = vec![0usize; all_scores.len()];
            let mut done = 0usize;
            for &(_, gi, _) in &pool {
                if done == budget {
                    break;
                }
                if pruned[gi] + 1 < all_scores[gi].values.len() {
                    pruned[gi] += 1;
                    done += 1;
                }
            }
            for (gi, sc) in all_scores.iter().enumerate() {
                keeps.insert(sc.layer_id.clone(), sc.values.len() - pruned[gi]);
            }
        }
    }
    Ok(keeps)
}

/// Cached values from one generator step, for backprop.
pub struct StepCache {
    gid: usize,
    /// Cell input (weight summary, or zeros under no_weights).
    x: Array1<f32>,
    lstm: Option<LstmStepCache>,
    /// (concat input, relu hidden, tanh output) for the MLP variant.
    mlp: Option<(Array1<f32>, Array1<f32>, Array1<f32>)>,
    /// Post-relu conv activations (hidden, positions) for the CNN variant.
    cnn: Option<Array2<f32>>,
    /// Cell output fed to the head.
    h: Array1<f32>,
}

/// Everything needed to backpropagate through one mask generation.
pub struct MaskGenTape {
    /// Prompt embedding, when the configured ablation uses one.
    pub embed: Option<Array1<f32>>,
    enc_tape: Option<EncoderTape>,
    steps: Vec<StepCache>,
    /// Scores per coupling group, in scan order.
    pub scores: Vec<ChannelScores>,
}

/// Gradients of a scalar loss w.r.t. the generator parameters and (through
/// the encoder) the prompt parameters.
pub struct HypernetGrads {
    /// Keyed by the same names [`HypernetState::for_each_param`] visits.
    pub by_name: BTreeMap<String, ArrayD<f32>>,
    /// Conditioning-path gradient for the prompt parameters (None when the
    /// ablation cuts the prompt out of the generator).
    pub dprompt: Option<Array3<f32>>,
}

fn group_of_rep(graph: &ModelGraph, rep: &str) -> Result<usize> {
    graph
        .layer(rep)
        .and_then(|l| l.group)
        .ok_or_else(|| Error::UnknownLayer(rep.to_string()))
}

/// Summary of a group representative's weights with its in-channels masked
/// by the producing group's current hard mask. In-masking is a hard
/// (non-differentiated) operation: scores react to it on the next forward
/// pass, not through this step's gradient.
fn masked_summary(
    graph: &ModelGraph,
    rep: &str,
    in_mask: Option<&ChannelMask>,
    max_channels: usize,
) -> Result<Array1<f32>> {
    let node = graph
        .node_by_id(rep)
        .ok_or_else(|| Error::UnknownLayer(rep.to_string()))?;
    match &node.op {
        Op::Conv(c) => {
            let (co, ci, kh, kw) = c.w.dim();
            if let Some(m) = in_mask {
                if m.len() != ci {
                    return Err(Error::InvalidMask {
                        layer: rep.into(),
                        reason: format!("in-mask {} bits for {ci} in-channels", m.len()),
                    });
                }
            }
            let denom = (ci * kh * kw) as f64;
            let mut v = Array1::<f32>::zeros(max_channels);
            for o in 0..co {
                let mut s = 0f64;
                for i in 0..ci {
                    if in_mask.map_or(true, |m| m.bits[i] == 1) {
                        s += c
                            .w
                            .slice(ndarray::s![o, i, .., ..])
                            .iter()
                            .map(|&x| x as f64)
                            .sum::<f64>();
                    }
                }
                v[o] = (s / denom) as f32;
            }
            Ok(v)
        }
        Op::Linear(l) => {
            let (out, inf) = l.w.dim();
            let denom = inf as f64;
            let mut v = Array1::<f32>::zeros(max_channels);
            for o in 0..out {
                let mut s = 0f64;
                for j in 0..inf {
                    let ch = j / l.spatial;
                    if in_mask.map_or(true, |m| m.bits[ch] == 1) {
                        s += l.w[[o, j]] as f64;
                    }
                }
                v[o] = (s / denom) as f32;
            }
            Ok(v)
        }
        other => Err(Error::UnknownLayer(format!(
            "group representative {rep} is a {} node",
            other.kind_str()
        ))),
    }
}

/// In-mask source for a representative: the hard mask of the group feeding
/// its input channels (None when fed by the image).
fn input_group(graph: &ModelGraph, rep: &str) -> Result<Option<usize>> {
    let layer = graph
        .layer(rep)
        .ok_or_else(|| Error::UnknownLayer(rep.to_string()))?;
    let Some(first) = layer.predecessors.first() else {
        return Ok(None);
    };
    if first == "input" {
        return Ok(None);
    }
    Ok(Some(group_of_rep(graph, first)?))
}

fn cnn_positions(d: usize) -> usize {
    (d + 2 * CNN_PAD - CNN_KERNEL) / CNN_STRIDE + 1
}

/// Run the scan: one generator step per coupling group in topological
/// order, with provisional uniform-budget masks maintained for in-masking.
fn scan(
    graph: &ModelGraph,
    state: &HypernetState,
    h0: &Array1<f32>,
    embed: Option<&Array1<f32>>,
    s: f32,
) -> Result<(Vec<StepCache>, Vec<ChannelScores>, Vec<ChannelMask>)> {
    let cfg = &state.config;
    let hsz = cfg.hidden_size;
    if h0.len() != hsz {
        return Err(Error::Shape(format!(
            "initial hidden state has {} entries, expected {hsz}",
            h0.len()
        )));
    }
    let mut h = h0.clone();
    let mut c = match (&state.cell0, &state.lstm) {
        (Some(c0), Some(_)) => c0.clone(),
        _ => Array1::zeros(hsz),
    };
    let mut steps = Vec::with_capacity(graph.groups().len());
    let mut scores = Vec::with_capacity(graph.groups().len());
    let mut provisional: Vec<ChannelMask> = Vec::with_capacity(graph.groups().len());

    for group in graph.groups() {
        let rep = group.layers[0].clone();
        let x = if matches!(cfg.ablation, Ablation::NoWeights) {
            Array1::zeros(cfg.max_channels)
        } else {
            let in_mask = match input_group(graph, &rep)? {
                Some(gid) => Some(&provisional[gid]),
                None => None,
            };
            masked_summary(graph, &rep, in_mask, cfg.max_channels)?
        };

        let mut cache = StepCache {
            gid: group.id,
            x: x.clone(),
            lstm: None,
            mlp: None,
            cnn: None,
            h: Array1::zeros(hsz),
        };
        let hg = match cfg.ablation {
            Ablation::Full | Ablation::NoPrompt | Ablation::NoWeights => {
                let cell = state.lstm.as_ref().expect("lstm allocated for this ablation");
                let (hn, cn, sc) = cell.step(&x, &h, &c);
                h = hn.clone();
                c = cn;
                cache.lstm = Some(sc);
                hn
            }
            Ablation::MlpVariant => {
                let m = state.mlp.as_ref().expect("mlp allocated");
                let e = embed.expect("mlp variant needs an embedding");
                let mut cat = Array1::<f32>::zeros(cfg.max_channels + hsz);
                cat.slice_mut(ndarray::s![0..cfg.max_channels]).assign(&x);
                cat.slice_mut(ndarray::s![cfg.max_channels..]).assign(e);
                let a1 = (m.w1.dot(&cat) + &m.b1).mapv(|v| v.max(0.0));
                let hg = (m.w2.dot(&a1) + &m.b2).mapv(f32::tanh);
                cache.mlp = Some((cat, a1, hg.clone()));
                hg
            }
            Ablation::CnnVariant => {
                let cc = state.cnn.as_ref().expect("cnn allocated");
                let d = cfg.max_channels;
                let pos = cnn_positions(d);
                let mut y = Array2::<f32>::zeros((hsz, pos));
                for ch in 0..hsz {
                    for p in 0..pos {
                        let mut acc = cc.b[ch];
                        for t in 0..CNN_KERNEL {
                            let src = p * CNN_STRIDE + t;
                            if src < CNN_PAD || src - CNN_PAD >= d {
                                continue;
                            }
                            acc += cc.w[[ch, t]] * x[src - CNN_PAD];
                        }
                        y[[ch, p]] = acc.max(0.0);
                    }
                }
                let hg = y.mean_axis(Axis(1)).expect("pos > 0");
                cache.cnn = Some(y);
                hg
            }
        };
        cache.h = hg.clone();

        let head = &state.heads[group.id];
        if head.w.dim() != (group.width, hsz) {
            return Err(Error::Config(format!(
                "head {} shaped {:?}, group needs ({}, {hsz})",
                group.id,
                head.w.dim(),
                group.width
            )));
        }
        let values = head.w.dot(&hg) + &head.b;
        let sc = ChannelScores { layer_id: rep, values };

        let pruned = (s as f64 * group.width as f64).floor() as usize;
        provisional.push(binarize(&sc, group.width - pruned)?);
        scores.push(sc);
        steps.push(cache);
    }
    Ok((steps, scores, provisional))
}

/// Resolve the initial hidden state (and encoder byproducts) for the
/// configured ablation.
fn initial_state(
    state: &HypernetState,
    prompt: &VisualPrompt,
) -> Result<(Array1<f32>, Option<Array1<f32>>, Option<EncoderTape>)> {
    match state.config.ablation {
        Ablation::NoPrompt => {
            let h0 = state.h0.clone().ok_or_else(|| {
                Error::Config("no_prompt generator missing its learned h0".into())
            })?;
            Ok((h0, None, None))
        }
        Ablation::CnnVariant => Ok((Array1::zeros(state.config.hidden_size), None, None)),
        _ => {
            let enc = state
                .encoder
                .as_ref()
                .ok_or_else(|| Error::Config("generator missing its prompt encoder".into()))?;
            let (embed, tape) = enc.forward(&prompt.canvas())?;
            if embed.len() != state.config.hidden_size {
                return Err(Error::Config(format!(
                    "encoder emits {} dims, generator hidden size is {}",
                    embed.len(),
                    state.config.hidden_size
                )));
            }
            Ok((embed.clone(), Some(embed), Some(tape)))
        }
    }
}

/// Channel scores for every coupling group given a prompt embedding.
/// `s` sets the provisional in-masking budget used along the scan.
pub fn recurrent_scores(
    graph: &ModelGraph,
    state: &HypernetState,
    prompt_embedding: &Array1<f32>,
    s: f32,
) -> Result<Vec<ChannelScores>> {
    if !(s > 0.0 && s < 1.0) {
        return Err(Error::Config(format!("sparsity {s} outside (0, 1)")));
    }
    let h0 = match state.config.ablation {
        Ablation::NoPrompt => state
            .h0
            .clone()
            .ok_or_else(|| Error::Config("no_prompt generator missing its learned h0".into()))?,
        Ablation::CnnVariant => Array1::zeros(state.config.hidden_size),
        _ => prompt_embedding.clone(),
    };
    let embed = prompt_embedding.clone();
    let (_, scores, _) = scan(graph, state, &h0, Some(&embed), s)?;
    Ok(scores)
}

/// Generate a full mask set and keep the tape for backprop.
pub fn generate_maskset_with_tape(
    graph: &ModelGraph,
    state: &HypernetState,
    prompt: &VisualPrompt,
    s: f32,
    allocation: Allocation,
) -> Result<(MaskSet, MaskGenTape)> {
    if !(s > 0.0 && s < 1.0) {
        return Err(Error::Config(format!("sparsity {s} outside (0, 1)")));
    }
    if state.heads.len() != graph.groups().len() {
        return Err(Error::Config(format!(
            "generator has {} heads, graph has {} coupling groups",
            state.heads.len(),
            graph.groups().len()
        )));
    }
    let (h0, embed, enc_tape) = initial_state(state, prompt)?;
    let (steps, scores, provisional) = scan(graph, state, &h0, embed.as_ref(), s)?;

    let masks = match allocation {
        Allocation::Uniform => provisional,
        Allocation::Global => {
            let keeps = allocate_budget(&scores, s, Allocation::Global)?;
            scores
                .iter()
                .map(|sc| binarize(sc, keeps[&sc.layer_id]))
                .collect::<Result<Vec<_>>>()?
        }
    };
    let maskset = MaskSet::from_group_masks(graph, &masks, s, allocation)?;
    Ok((maskset, MaskGenTape { embed, enc_tape, steps, scores }))
}

/// Generate a full mask set: encode the prompt, scan the groups, allocate
/// the budget, binarize. Deterministic given parameters.
pub fn generate_maskset(
    graph: &ModelGraph,
    state: &HypernetState,
    prompt: &VisualPrompt,
    s: f32,
    allocation: Allocation,
) -> Result<MaskSet> {
    generate_maskset_with_tape(graph, state, prompt, s, allocation).map(|(m, _)| m)
}

fn add_grad(map: &mut BTreeMap<String, ArrayD<f32>>, name: &str, g: ArrayD<f32>) {
    match map.get_mut(name) {
        Some(acc) => *acc += &g,
        None => {
            map.insert(name.to_string(), g);
        }
    }
}

/// Backpropagate per-mask-bit loss gradients through the generator.
///
/// `mask_bits` is keyed by layer id (as produced by the network backward
/// pass); members of a coupling group sum into their shared score gradient,
/// which crosses binarize unchanged (straight-through).
pub fn maskset_backward(
    graph: &ModelGraph,
    state: &HypernetState,
    prompt: &VisualPrompt,
    tape: &MaskGenTape,
    mask_bits: &BTreeMap<String, Vec<f32>>,
) -> Result<HypernetGrads> {
    let cfg = &state.config;
    let hsz = cfg.hidden_size;
    let mut by_name: BTreeMap<String, ArrayD<f32>> = BTreeMap::new();

    let mut dh_carry = Array1::<f32>::zeros(hsz);
    let mut dc_carry = Array1::<f32>::zeros(hsz);
    let mut dembed = Array1::<f32>::zeros(hsz);

    for step in tape.steps.iter().rev() {
        let group = &graph.groups()[step.gid];
        let mut dbits = Array1::<f32>::zeros(group.width);
        for member in &group.layers {
            if let Some(g) = mask_bits.get(member) {
                if g.len() != group.width {
                    return Err(Error::InvalidMask {
                        layer: member.clone(),
                        reason: format!(
                            "{} bit gradients for {} channels",
                            g.len(),
                            group.width
                        ),
                    });
                }
                for (i, &v) in g.iter().enumerate() {
                    dbits[i] += v;
                }
            }
        }
        let ds = binarize_backward(&dbits);

        let head = &state.heads[step.gid];
        add_grad(
            &mut by_name,
            &format!("head.{}.w", step.gid),
            (&ds.view().insert_axis(Axis(1)) * &step.h.view().insert_axis(Axis(0))).into_dyn(),
        );
        add_grad(&mut by_name, &format!("head.{}.b", step.gid), ds.clone().into_dyn());
        let dh = head.w.t().dot(&ds);

        match cfg.ablation {
            Ablation::Full | Ablation::NoPrompt | Ablation::NoWeights => {
                let cell = state.lstm.as_ref().expect("lstm allocated");
                let cache = step.lstm.as_ref().expect("lstm cache recorded");
                let dh_total = &dh + &dh_carry;
                let g = cell.step_backward(cache, &dh_total, &dc_carry);
                add_grad(&mut by_name, "lstm.wx", g.dwx.into_dyn());
                add_grad(&mut by_name, "lstm.wh", g.dwh.into_dyn());
                add_grad(&mut by_name, "lstm.b", g.db.into_dyn());
                dh_carry = g.dh_prev;
                dc_carry = g.dc_prev;
                // g.dx deliberately dropped: summaries are hard inputs.
            }
            Ablation::MlpVariant => {
                let m = state.mlp.as_ref().expect("mlp allocated");
                let (cat, a1, hg) = step.mlp.as_ref().expect("mlp cache recorded");
                let dz2 = &dh * &hg.mapv(|v| 1.0 - v * v);
                add_grad(
                    &mut by_name,
                    "mlp.w2",
                    (&dz2.view().insert_axis(Axis(1)) * &a1.view().insert_axis(Axis(0)))
                        .into_dyn(),
                );
                add_grad(&mut by_name, "mlp.b2", dz2.clone().into_dyn());
                let da1 = m.w2.t().dot(&dz2);
                let dz1 =
                    Array1::from_shape_fn(hsz, |i| if a1[i] > 0.0 { da1[i] } else { 0.0 });
                add_grad(
                    &mut by_name,
                    "mlp.w1",
                    (&dz1.view().insert_axis(Axis(1)) * &cat.view().insert_axis(Axis(0)))
                        .into_dyn(),
                );
                add_grad(&mut by_name, "mlp.b1", dz1.clone().into_dyn());
                let dcat = m.w1.t().dot(&dz1);
                dembed += &dcat.slice(ndarray::s![cfg.max_channels..]);
            }
            Ablation::CnnVariant => {
                let cc = state.cnn.as_ref().expect("cnn allocated");
                let y = step.cnn.as_ref().expect("cnn cache recorded");
                let pos = y.dim().1;
                let mut dw = Array2::<f32>::zeros(cc.w.dim());
                let mut db = Array1::<f32>::zeros(cc.b.len());
                for ch in 0..hsz {
                    let dmean = dh[ch] / pos as f32;
                    for p in 0..pos {
                        if y[[ch, p]] <= 0.0 {
                            continue;
                        }
                        db[ch] += dmean;
                        for t in 0..CNN_KERNEL {
                            let src = p * CNN_STRIDE + t;
                            if src < CNN_PAD || src - CNN_PAD >= cfg.max_channels {
                                continue;
                            }
                            dw[[ch, t]] += dmean * step.x[src - CNN_PAD];
                        }
                    }
                }
                add_grad(&mut by_name, "cnn.w", dw.into_dyn());
                add_grad(&mut by_name, "cnn.b", db.into_dyn());
            }
        }
    }

    // Initial-state gradients.
    match cfg.ablation {
        Ablation::Full | Ablation::NoWeights => {
            dembed += &dh_carry;
        }
        Ablation::NoPrompt => {
            add_grad(&mut by_name, "h0", dh_carry.clone().into_dyn());
        }
        _ => {}
    }
    if state.cell0.is_some() {
        add_grad(&mut by_name, "cell0", dc_carry.clone().into_dyn());
    }

    let mut dprompt = None;
    if let (Some(enc), Some(enc_tape)) = (&state.encoder, &tape.enc_tape) {
        let (eg, dcanvas) = enc.backward(enc_tape, &dembed)?;
        add_grad(&mut by_name, "encoder.w1", eg.dw1.into_dyn());
        add_grad(&mut by_name, "encoder.b1", eg.db1.into_dyn());
        add_grad(&mut by_name, "encoder.w2", eg.dw2.into_dyn());
        add_grad(&mut by_name, "encoder.b2", eg.db2.into_dyn());
        add_grad(&mut by_name, "encoder.w3", eg.dw3.into_dyn());
        add_grad(&mut by_name, "encoder.b3", eg.db3.into_dyn());
        dprompt = Some(prompt.canvas_backward(&dcanvas));
    }

    Ok(HypernetGrads { by_name, dprompt })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::{build_graph, Node};
    use crate::prompt::Placement;
    use ndarray::Array4;

    fn toy() -> ModelGraph {
        build_graph("toy", 4, 7).unwrap()
    }

    fn toy_prompt() -> VisualPrompt {
        let mut p = VisualPrompt::additive(3, (16, 16), 4, Placement::TopLeft).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for v in p.params.iter_mut() {
            *v = rng.random_range(-0.3..0.3);
        }
        p
    }

    fn toy_state(graph: &ModelGraph, ablation: Ablation) -> HypernetState {
        let mut cfg = HypernetConfig::for_graph(graph, Allocation::Uniform);
        cfg.hidden_size = 8;
        cfg.ablation = ablation;
        HypernetState::new(graph, cfg, 11).unwrap()
    }

    #[test]
    fn summary_means_and_pads() {
        // Two out-channels holding {1,3} and {2,6} -> means 2 and 4.
        let mut w = Array4::<f32>::zeros((2, 2, 1, 1));
        w[[0, 0, 0, 0]] = 1.0;
        w[[0, 1, 0, 0]] = 3.0;
        w[[1, 0, 0, 0]] = 2.0;
        w[[1, 1, 0, 0]] = 6.0;
        let s = summarize_weights("l", w.view(), 3);
        assert_eq!(s.vector.as_slice().unwrap(), &[2.0, 4.0, 0.0]);

        // In-masking zeroes a column but the mean still divides by all
        // C_I*K*K entries, so the summary drops.
        w[[0, 0, 0, 0]] = 0.0;
        w[[1, 0, 0, 0]] = 0.0;
        let s = summarize_weights("l", w.view(), 3);
        assert_eq!(s.vector.as_slice().unwrap(), &[1.5, 3.0, 0.0]);

        let z = Array4::<f32>::zeros((2, 2, 1, 1));
        assert!(summarize_weights("l", z.view(), 3).vector.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn binarize_keeps_top_k_with_lower_index_ties() {
        let sc = |v: &[f32]| ChannelScores {
            layer_id: "l".into(),
            values: Array1::from_vec(v.to_vec()),
        };
        assert_eq!(binarize(&sc(&[0.9, 0.1, 0.5, 0.3]), 2).unwrap().bits, vec![1, 0, 1, 0]);
        assert_eq!(binarize(&sc(&[0.9, 0.1, 0.5, 0.3]), 4).unwrap().bits, vec![1, 1, 1, 1]);
        assert_eq!(binarize(&sc(&[0.5, 0.5, 0.2, 0.1]), 2).unwrap().bits, vec![1, 1, 0, 0]);
        assert!(binarize(&sc(&[0.5, 0.5]), 0).is_err());
        assert!(binarize(&sc(&[0.5, 0.5]), 3).is_err());
    }

    #[test]
    fn binarize_is_invariant_to_positive_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let v = Array1::from_shape_fn(13, |_| rng.random_range(-2.0..2.0f32));
            let a = ChannelScores { layer_id: "l".into(), values: v.clone() };
            let b = ChannelScores { layer_id: "l".into(), values: v * 3.7 };
            assert_eq!(binarize(&a, 5).unwrap().bits, binarize(&b, 5).unwrap().bits);
        }
    }

    #[test]
    fn budget_examples_uniform_and_global() {
        let sc = |id: &str, v: &[f32]| ChannelScores {
            layer_id: id.into(),
            values: Array1::from_vec(v.to_vec()),
        };
        let two = [sc("a", &[0.9, 0.2]), sc("b", &[0.8, 0.1])];
        let ku = allocate_budget(&two, 0.5, Allocation::Uniform).unwrap();
        assert_eq!((ku["a"], ku["b"]), (1, 1));
        let kg = allocate_budget(&two, 0.5, Allocation::Global).unwrap();
        assert_eq!((kg["a"], kg["b"]), (1, 1));

        // Min-keep guard: the globally smallest score sits in a width-1
        // group, so its pruning is blocked and the deficit moves on.
        let guard = [sc("one", &[0.05]), sc("three", &[0.9, 0.2, 0.1])];
        let kg = allocate_budget(&guard, 0.5, Allocation::Global).unwrap();
        assert_eq!((kg["one"], kg["three"]), (1, 1));

        assert!(allocate_budget(&two, 0.0, Allocation::Global).is_err());
        assert!(allocate_budget(&two, 1.0, Allocation::Uniform).is_err());
    }

    #[test]
    fn global_budget_matches_a_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..30 {
            let widths = [
                rng.random_range(2..20usize),
                rng.random_range(2..20usize),
                rng.random_range(2..20usize),
            ];
            let scores: Vec<ChannelScores> = widths
                .iter()
                .enumerate()
                .map(|(i, &w)| ChannelScores {
                    layer_id: format!("g{i}"),
                    values: Array1::from_shape_fn(w, |_| rng.random_range(-1.0..1.0f32)),
                })
                .collect();
            let s = rng.random_range(0.05..0.95f32);
            let keeps = allocate_budget(&scores, s, Allocation::Global).unwrap();
            let total: usize = widths.iter().sum();
            let budget = (s as f64 * total as f64).floor() as usize;
            let pruned: usize =
                widths.iter().zip(scores.iter()).map(|(&w, sc)| w - keeps[&sc.layer_id]).sum();
            // Oracle: prune the globally smallest while every group keeps
            // one — exact match unless guards bind.
            let mut all: Vec<f32> = scores.iter().flat_map(|s| s.values.to_vec()).collect();
            all.sort_by(f32::total_cmp);
            if budget <= total - widths.len() {
                assert_eq!(pruned, budget, "trial {trial}");
            } else {
                assert_eq!(pruned, total - widths.len(), "trial {trial} (all guards bind)");
            }
            for sc in &scores {
                assert!(keeps[&sc.layer_id] >= 1);
            }
        }
    }

    #[test]
    fn single_group_scores_compose_cell_and_head_by_hand() {
        // input -> conv -> gap -> fc has exactly one coupling group, so the
        // scores must be head(LSTM-step(summary, h0, c0)).
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let nodes = vec![
            Node { id: "input".into(), op: Op::Input, inputs: vec![] },
            Node {
                id: "conv1".into(),
                op: Op::Conv(crate::netgraph::Conv2d {
                    w: crate::nn::he_conv(&mut rng, 6, 3, 3),
                    b: Some(Array1::zeros(6)),
                    bn: None,
                    stride: 1,
                    padding: 1,
                    relu: true,
                }),
                inputs: vec![0],
            },
            Node { id: "avgpool".into(), op: Op::GlobalAvgPool, inputs: vec![1] },
            Node {
                id: "fc".into(),
                op: Op::Linear(crate::netgraph::Linear {
                    w: crate::nn::he_linear(&mut rng, 4, 6),
                    b: Some(Array1::zeros(4)),
                    in_channels: 6,
                    spatial: 1,
                    relu: false,
                }),
                inputs: vec![2],
            },
        ];
        let graph = ModelGraph::new("one", (3, 8, 8), 4, nodes).unwrap();
        assert_eq!(graph.groups().len(), 1);
        let state = toy_state(&graph, Ablation::Full);
        let embed = Array1::from_shape_fn(8, |_| rng.random_range(-1.0..1.0f32));
        let scores = recurrent_scores(&graph, &state, &embed, 0.3).unwrap();

        let w = match &graph.node_by_id("conv1").unwrap().op {
            Op::Conv(c) => c.w.clone(),
            _ => unreachable!(),
        };
        let summary = summarize_weights("conv1", w.view(), state.config.max_channels);
        let c0 = state.cell0.clone().unwrap();
        let (h1, _, _) = state.lstm.as_ref().unwrap().step(&summary.vector, &embed, &c0);
        let expect = state.heads[0].w.dot(&h1) + &state.heads[0].b;
        assert_eq!(scores.len(), 1);
        for (a, b) in scores[0].values.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn no_prompt_scores_ignore_the_prompt_entirely() {
        let graph = toy();
        let state = toy_state(&graph, Ablation::NoPrompt);
        let p1 = toy_prompt();
        let mut p2 = toy_prompt();
        p2.params.fill(123.0);
        let (m1, t1) = generate_maskset_with_tape(&graph, &state, &p1, 0.3, Allocation::Uniform)
            .unwrap();
        let (m2, t2) = generate_maskset_with_tape(&graph, &state, &p2, 0.3, Allocation::Uniform)
            .unwrap();
        assert_eq!(m1.masks, m2.masks);
        for (a, b) in t1.scores.iter().zip(t2.scores.iter()) {
            assert_eq!(a.values, b.values, "score drift under a prompt change");
        }
    }

    #[test]
    fn no_weights_scores_ignore_the_backbone_weights() {
        let mut graph = toy();
        let state = toy_state(&graph, Ablation::NoWeights);
        let p = toy_prompt();
        let (_, t1) =
            generate_maskset_with_tape(&graph, &state, &p, 0.3, Allocation::Uniform).unwrap();
        if let Op::Conv(c) = &mut graph.node_by_id_mut("conv1").unwrap().op {
            c.w.fill(5.0);
        }
        let (_, t2) =
            generate_maskset_with_tape(&graph, &state, &p, 0.3, Allocation::Uniform).unwrap();
        for (a, b) in t1.scores.iter().zip(t2.scores.iter()) {
            assert_eq!(a.values, b.values);
        }
    }

    #[test]
    fn summary_padding_never_reaches_the_scores() {
        // Junk in the LSTM's input columns beyond every real channel index
        // must change nothing, because summaries are zero there.
        let graph = toy();
        let mut cfg = HypernetConfig::for_graph(&graph, Allocation::Uniform);
        cfg.hidden_size = 8;
        cfg.max_channels = 24; // toy widths are 8 and 16
        let state = HypernetState::new(&graph, cfg, 11).unwrap();
        let p = toy_prompt();
        let (_, t1) =
            generate_maskset_with_tape(&graph, &state, &p, 0.3, Allocation::Uniform).unwrap();
        let mut tweaked = state.clone();
        for r in 0..tweaked.lstm.as_ref().unwrap().wx.dim().0 {
            for c in 16..24 {
                tweaked.lstm.as_mut().unwrap().wx[[r, c]] = 1e6;
            }
        }
        let (_, t2) =
            generate_maskset_with_tape(&graph, &tweaked, &p, 0.3, Allocation::Uniform).unwrap();
        for (a, b) in t1.scores.iter().zip(t2.scores.iter()) {
            assert_eq!(a.values, b.values);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let graph = toy();
        let state = toy_state(&graph, Ablation::Full);
        let p = toy_prompt();
        let m1 = generate_maskset(&graph, &state, &p, 0.4, Allocation::Global).unwrap();
        let m2 = generate_maskset(&graph, &state, &p, 0.4, Allocation::Global).unwrap();
        assert_eq!(m1.to_json_string(), m2.to_json_string());
    }

    #[test]
    fn tiny_sparsity_keeps_everything() {
        let graph = toy();
        let state = toy_state(&graph, Ablation::Full);
        let p = toy_prompt();
        let m = generate_maskset(&graph, &state, &p, 1e-3, Allocation::Uniform).unwrap();
        for mask in m.masks.values() {
            assert!(mask.bits.iter().all(|&b| b == 1));
        }
    }

    #[test]
    fn uniform_generation_hits_the_per_group_budget() {
        let graph = toy();
        let state = toy_state(&graph, Ablation::Full);
        let p = toy_prompt();
        for s in [0.1f32, 0.3, 0.5, 0.7] {
            let m = generate_maskset(&graph, &state, &p, s, Allocation::Uniform).unwrap();
            for g in graph.groups() {
                let kept = m.masks[&g.layers[0]].kept();
                let pruned = (s as f64 * g.width as f64).floor() as usize;
                assert_eq!(kept, g.width - pruned, "s={s} group {}", g.id);
            }
        }
    }

    #[test]
    fn variant_cells_generate_valid_masks() {
        let graph = toy();
        let p = toy_prompt();
        for ab in [Ablation::MlpVariant, Ablation::CnnVariant] {
            let state = toy_state(&graph, ab);
            let (m, tape) =
                generate_maskset_with_tape(&graph, &state, &p, 0.3, Allocation::Global).unwrap();
            m.validate(&graph).unwrap();
            assert!(tape.scores.iter().all(|s| s.values.iter().all(|v| v.is_finite())));
            // Backward runs and touches the variant's own parameters.
            let mut bits = BTreeMap::new();
            for g in graph.groups() {
                bits.insert(g.layers[0].clone(), vec![0.1; g.width]);
            }
            let grads = maskset_backward(&graph, &state, &p, &tape, &bits).unwrap();
            match ab {
                Ablation::MlpVariant => {
                    assert!(grads.by_name.contains_key("mlp.w1"));
                    assert!(grads.dprompt.is_some());
                }
                _ => {
                    assert!(grads.by_name.contains_key("cnn.w"));
                    assert!(grads.dprompt.is_none());
                }
            }
        }
    }

    #[test]
    fn ste_passes_score_gradients_through_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..100 {
            let v = Array1::from_shape_fn(17, |_| rng.random_range(-3.0..3.0f32));
            assert_eq!(binarize_backward(&v), v);
        }
    }

    #[test]
    fn backward_matches_finite_differences_on_scores() {
        // J = sum_g <r_g, scores_g>. The generator's backward gets r
        // injected as the per-bit gradient (straight-through makes that the
        // score gradient) and must match central differences through the
        // LSTM, heads, encoder, c0, and the prompt itself.
        let graph = toy();
        let state = toy_state(&graph, Ablation::Full);
        let prompt = toy_prompt();
        let s = 0.3f32;
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let r: Vec<Array1<f32>> = graph
            .groups()
            .iter()
            .map(|g| Array1::from_shape_fn(g.width, |_| rng.random_range(-1.0..1.0f32)))
            .collect();

        let objective = |st: &HypernetState, pr: &VisualPrompt| -> f64 {
            let (_, tape) =
                generate_maskset_with_tape(&graph, st, pr, s, Allocation::Uniform).unwrap();
            tape.scores
                .iter()
                .zip(r.iter())
                .map(|(sc, ri)| sc.values.dot(ri) as f64)
                .sum()
        };

        let (_, tape) =
            generate_maskset_with_tape(&graph, &state, &prompt, s, Allocation::Uniform).unwrap();
        let mut bits = BTreeMap::new();
        for (g, ri) in graph.groups().iter().zip(r.iter()) {
            bits.insert(g.layers[0].clone(), ri.to_vec());
        }
        let grads = maskset_backward(&graph, &state, &prompt, &tape, &bits).unwrap();

        let h = 1e-3f32;
        let check = |name: &str, idx: &[usize]| {
            let an = grads.by_name[name][idx];
            let run = |sign: f32| -> f64 {
                let mut st = state.clone();
                st.for_each_param_mut(&mut |n, mut v| {
                    if n == name {
                        v[idx] += sign * h;
                    }
                });
                objective(&st, &prompt)
            };
            let fd = (run(1.0) - run(-1.0)) / (2.0 * h as f64);
            assert!(
                (fd - an as f64).abs() < 2e-2 + 3e-2 * fd.abs(),
                "{name}[{idx:?}]: fd={fd} an={an}"
            );
        };
        check("lstm.wx", &[3, 2]);
        check("lstm.wh", &[10, 4]);
        check("lstm.b", &[7]);
        check("head.1.w", &[5, 3]);
        check("head.0.b", &[2]);
        check("encoder.w2", &[4, 7, 1, 2]);
        check("cell0", &[3]);

        // Prompt conditioning path.
        let dp = grads.dprompt.as_ref().unwrap();
        let idx = [1usize, 2, 3];
        let mut pp = prompt.clone();
        pp.params[idx] += h;
        let mut pm = prompt.clone();
        pm.params[idx] -= h;
        let fd = (objective(&state, &pp) - objective(&state, &pm)) / (2.0 * h as f64);
        assert!(
            (fd - dp[idx] as f64).abs() < 2e-2 + 3e-2 * fd.abs(),
            "prompt[{idx:?}]: fd={fd} an={}",
            dp[idx]
        );
    }

    #[test]
    fn resnet18_parameter_budget_sits_in_its_window() {
        let graph = build_graph("resnet18", 1000, 3).unwrap();
        let cfg = HypernetConfig::for_graph(&graph, Allocation::Global);
        assert_eq!(cfg.max_channels, 512);
        let state = HypernetState::new(&graph, cfg, 5).unwrap();
        // 4*(512+64+1)*64 LSTM + 65 * 2880 heads + encoder + c0.
        assert_eq!(state.param_count(), 147_712 + 187_200 + 23_584 + 64);
        assert!(state.param_count() >= 260_000 && state.param_count() <= 360_000);
        let ratio = state.param_count() as f64 / graph.param_count() as f64;
        assert!(ratio <= 0.035, "ratio {ratio}");
    }

    #[test]
    fn parameter_ratio_stays_small_on_the_big_configs() {
        for arch in ["resnet34", "resnet50", "vgg16"] {
            let graph = build_graph(arch, 1000, 3).unwrap();
            let cfg = HypernetConfig::for_graph(&graph, Allocation::Global);
            let state = HypernetState::new(&graph, cfg, 5).unwrap();
            let ratio = state.param_count() as f64 / graph.param_count() as f64;
            assert!(ratio <= 0.07, "{arch}: ratio {ratio}");
        }
    }

    #[test]
    fn state_roundtrips_through_its_checkpoint() {
        let graph = toy();
        let state = toy_state(&graph, Ablation::Full);
        let dir = tempfile::tempdir().unwrap();
        state.save(dir.path()).unwrap();
        let loaded = HypernetState::load(dir.path()).unwrap();
        assert_eq!(loaded.param_count(), state.param_count());
        let mut names = Vec::new();
        loaded.for_each_param(&mut |n, v| {
            names.push(n.to_string());
            let mut matched = false;
            state.for_each_param(&mut |n2, v2| {
                if n2 == n {
                    assert_eq!(v, v2, "{n}");
                    matched = true;
                }
            });
            assert!(matched, "{n} missing from the original");
        });
        assert!(names.contains(&"lstm.wx".to_string()));
        let p = toy_prompt();
        let a = generate_maskset(&graph, &state, &p, 0.3, Allocation::Global).unwrap();
        let b = generate_maskset(&graph, &loaded, &p, 0.3, Allocation::Global).unwrap();
        assert_eq!(a.to_json_string(), b.to_json_string());
    }

    #[test]
    fn coupled_layers_share_identical_masks() {
        let graph = build_graph("resnet18-tiny", 10, 21).unwrap();
        let cfg = HypernetConfig::for_graph(&graph, Allocation::Global);
        let state = HypernetState::new(&graph, cfg, 13).unwrap();
        let mut p = VisualPrompt::additive(3, (32, 32), 4, Placement::TopLeft).unwrap();
        p.params.fill(0.1);
        let m = generate_maskset(&graph, &state, &p, 0.5, Allocation::Global).unwrap();
        for g in graph.groups() {
            let first = &m.masks[&g.layers[0]];
            for member in &g.layers[1..] {
                assert_eq!(&m.masks[member], first, "group {} member {member}", g.id);
            }
        }
        m.validate(&graph).unwrap();
    }
}

//! Two-stage training pipeline.
//!
//! Stage 1 learns the visual prompt and the mask generator against a frozen
//! backbone: masks are regenerated from the current parameters at every
//! step, batch norm runs in eval mode, and the prompt receives gradient both
//! through the image it is painted on and through the generator it
//! conditions. Stage 2 freezes the masks and fine-tunes the surviving
//! weights together with the prompt, batch norm back in training mode.
//! Transfer utilities reuse either the masks or the whole generator on a new
//! task, and `pretrain` produces the dense source model everything starts
//! from.

pub mod optim;

pub use optim::{OptimConfig, OptimMethod, Optimizer, Schedule};

use crate::data::{epoch_batches, eval_batches, Dataset};
use crate::hypernet::{generate_maskset_with_tape, maskset_backward, HypernetState};
use crate::netgraph::{
    apply_masks, backward, extract_subnetwork, forward, update_running_stats, Allocation, BnMode,
    Grads, GradWants, MaskSet, ModelGraph,
};
use crate::nn;
use crate::prompt::VisualPrompt;
use crate::{Error, Result};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::time::Instant;

// ---------------------------------------------------------------- labels

/// How a label map was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapMethod {
    /// Frequency-based mapping from downstream classes onto source logits.
    Flm,
    /// Class i uses logit i (source-task training).
    Identity,
}

/// Injective assignment of downstream classes to source-model logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMap {
    /// `mapping[class] = source logit index`.
    pub mapping: Vec<usize>,
    pub method: MapMethod,
}

impl LabelMap {
    pub fn identity(classes: usize) -> Self {
        Self { mapping: (0..classes).collect(), method: MapMethod::Identity }
    }

    pub fn validate(&self, source_logits: usize) -> Result<()> {
        let mut seen = vec![false; source_logits];
        for &s in &self.mapping {
            if s >= source_logits {
                return Err(Error::LabelMap(format!(
                    "mapped index {s} outside {source_logits} source logits"
                )));
            }
            if seen[s] {
                return Err(Error::LabelMap(format!("source logit {s} assigned twice")));
            }
            seen[s] = true;
        }
        Ok(())
    }

    /// Select the mapped source logits, one column per downstream class.
    pub fn gather(&self, logits: &Array2<f32>) -> Array2<f32> {
        let n = logits.nrows();
        let mut out = Array2::<f32>::zeros((n, self.mapping.len()));
        for (t, &s) in self.mapping.iter().enumerate() {
            out.column_mut(t).assign(&logits.column(s));
        }
        out
    }

    /// Adjoint of [`Self::gather`]: route class-gradient columns back onto
    /// the source logit layout.
    pub fn scatter(&self, dmapped: &Array2<f32>, source_logits: usize) -> Array2<f32> {
        let n = dmapped.nrows();
        let mut out = Array2::<f32>::zeros((n, source_logits));
        for (t, &s) in self.mapping.iter().enumerate() {
            out.column_mut(s).assign(&dmapped.column(t));
        }
        out
    }
}

/// Greedy assignment from a count matrix `counts[class][source_logit]`:
/// repeatedly take the best-supported unassigned (class, logit) pair, ties
/// preferring the lower logit index, then the lower class.
fn assign_from_counts(counts: &[Vec<usize>], source_logits: usize) -> Vec<usize> {
    let classes = counts.len();
    let mut triples = Vec::with_capacity(classes * source_logits);
    for (t, row) in counts.iter().enumerate() {
        for s in 0..source_logits {
            triples.push((row[s], s, t));
        }
    }
    triples.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut mapping = vec![usize::MAX; classes];
    let mut used = vec![false; source_logits];
    let mut assigned = 0;
    for (_, s, t) in triples {
        if mapping[t] == usize::MAX && !used[s] {
            mapping[t] = s;
            used[s] = true;
            assigned += 1;
            if assigned == classes {
                break;
            }
        }
    }
    mapping
}

/// Build a frequency-based label map: run the (optionally masked, prompted)
/// model over the dataset and count which source logit wins for each class,
/// then assign greedily, most-supported pairs first.
pub fn build_flm(
    graph: &ModelGraph,
    masks: Option<&MaskSet>,
    prompt: Option<&VisualPrompt>,
    data: &Dataset,
    batch_size: usize,
) -> Result<LabelMap> {
    let source_logits = output_dim(graph)?;
    if data.num_classes > source_logits {
        return Err(Error::LabelMap(format!(
            "{} classes cannot map injectively onto {} source logits",
            data.num_classes, source_logits
        )));
    }
    let mut counts = vec![vec![0usize; source_logits]; data.num_classes];
    for idx in eval_batches(data.len(), batch_size) {
        let (x, y) = data.batch(&idx);
        let xp = match prompt {
            Some(p) => p.apply(&x)?,
            None => x,
        };
        let logits = crate::netgraph::logits_of(graph, &xp, masks)?;
        for (row, &class) in y.iter().enumerate() {
            let winner = logits
                .row(row)
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
                .map(|(j, _)| j)
                .unwrap_or(0);
            counts[class][winner] += 1;
        }
    }
    let mapping = assign_from_counts(&counts, source_logits);
    let map = LabelMap { mapping, method: MapMethod::Flm };
    map.validate(source_logits)?;
    Ok(map)
}

fn output_dim(graph: &ModelGraph) -> Result<usize> {
    graph
        .layers()
        .last()
        .map(|l| l.out_channels)
        .ok_or_else(|| Error::Config("graph has no layers".into()))
}

// ---------------------------------------------------------------- configs

/// Mask-learning stage recipe. Defaults follow the experiment setup:
/// 50 epochs at batch 128, prompt under SGD (lr 1e-2, no decay, cosine),
/// generator under AdamW (lr 1e-3, decay 1e-2, cosine).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub prompt: OptimConfig,
    pub hypernet: OptimConfig,
    pub seed: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self::defaults(0)
    }
}

impl Stage1Config {
    pub fn defaults(seed: u64) -> Self {
        Self {
            epochs: 50,
            batch_size: 128,
            prompt: OptimConfig::sgd(1e-2, 0.0, Schedule::Cosine),
            hypernet: OptimConfig::adamw(1e-3, 1e-2, Schedule::Cosine),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        self.prompt.validate()?;
        self.hypernet.validate()
    }
}

/// Fine-tuning stage recipe. Named constructors carry the per-dataset
/// defaults; `generic` covers everything without its own schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub prompt: OptimConfig,
    pub weights: OptimConfig,
    pub seed: u64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self::generic(0)
    }
}

impl Stage2Config {
    /// 50 epochs, prompt SGD 1e-2, weights SGD 1e-2 with 3e-4 decay, cosine.
    pub fn cifar10(seed: u64) -> Self {
        Self {
            epochs: 50,
            batch_size: 128,
            prompt: OptimConfig::sgd(1e-2, 0.0, Schedule::Cosine),
            weights: OptimConfig::sgd(1e-2, 3e-4, Schedule::Cosine),
            seed,
        }
    }

    /// 10 epochs, prompt SGD 1e-3, weights SGD 1e-3 with 5e-4 decay stepped
    /// down at epochs 6 and 8.
    pub fn tiny_imagenet(seed: u64) -> Self {
        Self {
            epochs: 10,
            batch_size: 128,
            prompt: OptimConfig::sgd(1e-3, 0.0, Schedule::Cosine),
            weights: OptimConfig::sgd(
                1e-3,
                5e-4,
                Schedule::MultiStep { milestones: vec![6, 8], gamma: 0.1 },
            ),
            seed,
        }
    }

    /// 50 epochs, prompt SGD 1e-2, weights SGD 1e-2 with 5e-4 decay, cosine.
    pub fn generic(seed: u64) -> Self {
        Self {
            epochs: 50,
            batch_size: 128,
            prompt: OptimConfig::sgd(1e-2, 0.0, Schedule::Cosine),
            weights: OptimConfig::sgd(1e-2, 5e-4, Schedule::Cosine),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        self.prompt.validate()?;
        self.weights.validate()
    }
}

// ---------------------------------------------------------------- records

/// Per-epoch training metrics plus mean wall-clock seconds per epoch.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainTrace {
    pub epoch_loss: Vec<f64>,
    pub epoch_acc: Vec<f64>,
    pub epoch_time_s: f64,
}

/// One finished run, as written to `record.json` and the results CSV. The
/// CSV keeps its pinned nine columns; `method` and the per-epoch curves
/// live only in the JSON form.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub task: String,
    pub arch: String,
    pub method: String,
    pub sparsity: f32,
    pub allocation: String,
    pub flops: u64,
    pub params: u64,
    /// Final test accuracy (percent) of the extracted subnetwork.
    pub acc: f64,
    pub seed: u64,
    pub epoch_time_s: f64,
    pub epoch_loss: Vec<f64>,
    pub epoch_acc: Vec<f64>,
    pub config_hash: String,
}

impl RunRecord {
    pub fn csv_header() -> &'static str {
        "task,arch,sparsity,allocation,flops,params,acc,seed,epoch_time_s"
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("record serialization cannot fail")
    }

    fn csv_key(&self) -> (String, String, String, String, String) {
        (
            self.task.clone(),
            self.arch.clone(),
            format!("{}", self.sparsity),
            self.allocation.clone(),
            format!("{}", self.seed),
        )
    }
}

/// Append a record to a results CSV, replacing any earlier row with the
/// same (task, arch, sparsity, allocation, seed) so reruns stay idempotent.
pub fn append_record_csv(path: &std::path::Path, record: &RunRecord) -> Result<()> {
    let mut rows: Vec<Vec<String>> = Vec::new();
    if path.exists() {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Data(e.to_string()))?;
        for row in rdr.records() {
            let row = row.map_err(|e| Error::Data(e.to_string()))?;
            rows.push(row.iter().map(|s| s.to_string()).collect());
        }
    }
    let key = record.csv_key();
    rows.retain(|r| {
        r.len() < 9
            || (r[0].clone(), r[1].clone(), r[2].clone(), r[3].clone(), r[7].clone()) != key
    });
    rows.push(vec![
        record.task.clone(),
        record.arch.clone(),
        format!("{}", record.sparsity),
        record.allocation.clone(),
        format!("{}", record.flops),
        format!("{}", record.params),
        format!("{}", record.acc),
        format!("{}", record.seed),
        format!("{}", record.epoch_time_s),
    ]);
    let mut wtr = csv::Writer::from_path(path).map_err(|e| Error::Data(e.to_string()))?;
    wtr.write_record(RunRecord::csv_header().split(','))
        .map_err(|e| Error::Data(e.to_string()))?;
    for row in rows {
        wtr.write_record(&row).map_err(|e| Error::Data(e.to_string()))?;
    }
    wtr.flush()?;
    Ok(())
}

// ---------------------------------------------------------------- hashing

/// Hex SHA-256 of a JSON value in its canonical (sorted-key) rendering.
pub fn config_hash(value: &serde_json::Value) -> String {
    let mut h = Sha256::new();
    h.update(value.to_string().as_bytes());
    hex(&h.finalize())
}

/// Hex SHA-256 over every graph parameter in visitation order; two graphs
/// hash equal iff their trainable tensors are bit-identical.
pub fn graph_params_hash(graph: &ModelGraph) -> String {
    let mut h = Sha256::new();
    graph.for_each_param(&mut |name, view| {
        h.update(name.as_bytes());
        for v in view.iter() {
            h.update(v.to_le_bytes());
        }
    });
    hex(&h.finalize())
}

/// Hex SHA-256 over generator parameters, optionally restricted to names
/// starting with one of `prefixes`.
pub fn hypernet_params_hash(state: &HypernetState, prefixes: Option<&[&str]>) -> String {
    let mut h = Sha256::new();
    state.for_each_param(&mut |name, view| {
        if prefixes.is_none_or(|ps| ps.iter().any(|p| name.starts_with(p))) {
            h.update(name.as_bytes());
            for v in view.iter() {
                h.update(v.to_le_bytes());
            }
        }
    });
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    use std::fmt::Write;
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

// ---------------------------------------------------------------- helpers

fn slice_of<'a>(a: &'a ndarray::ArrayD<f32>) -> &'a [f32] {
    a.as_slice().expect("gradient arrays are standard layout")
}

fn prompt_step(opt: &mut Optimizer, lr: f32, prompt: &mut VisualPrompt, d: &Array3<f32>) {
    opt.step(
        "prompt.params",
        lr,
        prompt.params.as_slice_mut().expect("prompt params are standard layout"),
        d.as_slice().expect("prompt gradient is standard layout"),
    );
}

fn hypernet_step(
    opt: &mut Optimizer,
    lr: f32,
    state: &mut HypernetState,
    grads: &BTreeMap<String, ndarray::ArrayD<f32>>,
) {
    state.for_each_param_mut(&mut |name, mut view| {
        if let Some(g) = grads.get(name) {
            opt.step(name, lr, view.as_slice_mut().expect("standard layout"), slice_of(g));
        }
    });
}

fn graph_step(opt: &mut Optimizer, lr: f32, graph: &mut ModelGraph, grads: &Grads) {
    let mut flat: BTreeMap<String, Vec<f32>> = BTreeMap::new();
    for (id, lg) in &grads.layers {
        if let Some(dw) = &lg.dw_conv {
            flat.insert(format!("{id}.w"), dw.iter().copied().collect());
        }
        if let Some(dw) = &lg.dw_lin {
            flat.insert(format!("{id}.w"), dw.iter().copied().collect());
        }
        if let Some(db) = &lg.db {
            flat.insert(format!("{id}.b"), db.to_vec());
        }
        if let Some(dg) = &lg.dgamma {
            flat.insert(format!("{id}.bn.gamma"), dg.to_vec());
        }
        if let Some(db) = &lg.dbeta {
            flat.insert(format!("{id}.bn.beta"), db.to_vec());
        }
    }
    graph.for_each_param_mut(&mut |name, mut view| {
        if let Some(g) = flat.get(name) {
            opt.step(name, lr, view.as_slice_mut().expect("standard layout"), g);
        }
    });
}

/// Mean loss and accuracy (percent) over a dataset, eval mode.
pub fn evaluate(
    graph: &ModelGraph,
    masks: Option<&MaskSet>,
    prompt: Option<&VisualPrompt>,
    map: Option<&LabelMap>,
    data: &Dataset,
    batch_size: usize,
) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let mut loss_sum = 0.0f64;
    let mut correct = 0usize;
    for idx in eval_batches(data.len(), batch_size) {
        let (x, y) = data.batch(&idx);
        let xp = match prompt {
            Some(p) => p.apply(&x)?,
            None => x,
        };
        let logits = crate::netgraph::logits_of(graph, &xp, masks)?;
        let mapped = match map {
            Some(m) => m.gather(&logits),
            None => logits,
        };
        let (loss, _, corr) = nn::cross_entropy(&mapped, &y);
        loss_sum += loss * y.len() as f64;
        correct += corr;
    }
    Ok((loss_sum / data.len() as f64, 100.0 * correct as f64 / data.len() as f64))
}

// ---------------------------------------------------------------- stage 1

/// Everything stage 1 produces.
#[derive(Debug)]
pub struct Stage1Result {
    pub prompt: VisualPrompt,
    pub hypernet: HypernetState,
    pub masks: MaskSet,
    pub label_map: LabelMap,
    pub trace: TrainTrace,
}

/// Learn prompt and mask generator against a frozen backbone. The label
/// map is built once at entry (dense model, fresh prompt); masks are
/// regenerated from scratch every step so the returned set — regenerated
/// once more after the last step — reflects the final parameters even for
/// zero-epoch runs.
pub fn stage1_learn(
    graph: &ModelGraph,
    data: &Dataset,
    prompt: VisualPrompt,
    hypernet: HypernetState,
    cfg: &Stage1Config,
    sparsity: f32,
    allocation: Allocation,
) -> Result<Stage1Result> {
    let mut hypernet = hypernet;
    let (prompt, masks, label_map, trace) =
        stage1_inner(graph, data, prompt, &mut hypernet, true, cfg, sparsity, allocation)?;
    Ok(Stage1Result { prompt, hypernet, masks, label_map, trace })
}

#[allow(clippy::too_many_arguments)]
fn stage1_inner(
    graph: &ModelGraph,
    data: &Dataset,
    mut prompt: VisualPrompt,
    hypernet: &mut HypernetState,
    train_hypernet: bool,
    cfg: &Stage1Config,
    sparsity: f32,
    allocation: Allocation,
) -> Result<(VisualPrompt, MaskSet, LabelMap, TrainTrace)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("cannot train on an empty dataset".into()));
    }
    let label_map = build_flm(graph, None, Some(&prompt), data, cfg.batch_size)?;
    let source_logits = output_dim(graph)?;
    let mut popt = Optimizer::new(&cfg.prompt);
    let mut hopt = Optimizer::new(&cfg.hypernet);
    let mut trace = TrainTrace::default();
    let mut times = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr_p = cfg.prompt.lr_at(epoch, cfg.epochs);
        let lr_h = cfg.hypernet.lr_at(epoch, cfg.epochs);
        let started = Instant::now();
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        let mut seen = 0usize;
        for (step, idx) in
            epoch_batches(data.len(), cfg.batch_size, cfg.seed, epoch).iter().enumerate()
        {
            let (x, y) = data.batch(idx);
            let xp = prompt.apply(&x)?;
            let (masks, gen_tape) =
                generate_maskset_with_tape(graph, hypernet, &prompt, sparsity, allocation)?;
            let tape =
                forward(graph, &xp, BnMode::Eval, Some(&masks), GradWants::PROMPT_AND_MASKS)?;
            let mapped = label_map.gather(&tape.logits);
            let (loss, dmapped, corr) = nn::cross_entropy(&mapped, &y);
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, step, loss });
            }
            let dlogits = label_map.scatter(&dmapped, source_logits);
            let grads = backward(graph, &tape, &dlogits)?;
            let mut dprompt =
                prompt.apply_backward(grads.input.as_ref().expect("input gradient requested"));
            let hgrads = maskset_backward(graph, hypernet, &prompt, &gen_tape, &grads.mask_bits)?;
            if let Some(dp) = &hgrads.dprompt {
                dprompt += dp;
            }
            prompt_step(&mut popt, lr_p, &mut prompt, &dprompt);
            if train_hypernet {
                hypernet_step(&mut hopt, lr_h, hypernet, &hgrads.by_name);
            }
            loss_sum += loss * y.len() as f64;
            correct += corr;
            seen += y.len();
        }
        times.push(started.elapsed().as_secs_f64());
        trace.epoch_loss.push(loss_sum / seen.max(1) as f64);
        trace.epoch_acc.push(100.0 * correct as f64 / seen.max(1) as f64);
    }
    trace.epoch_time_s =
        if times.is_empty() { 0.0 } else { times.iter().sum::<f64>() / times.len() as f64 };
    let (masks, _) = generate_maskset_with_tape(graph, hypernet, &prompt, sparsity, allocation)?;
    Ok((prompt, masks, label_map, trace))
}

/// Train only the prompt against fixed masks (the prompt-only baseline and
/// the reference point for generator overhead timing).
pub fn stage1_prompt_only(
    graph: &ModelGraph,
    data: &Dataset,
    mut prompt: VisualPrompt,
    masks: &MaskSet,
    cfg: &Stage1Config,
) -> Result<(VisualPrompt, LabelMap, TrainTrace)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("cannot train on an empty dataset".into()));
    }
    masks.validate(graph)?;
    let label_map = build_flm(graph, Some(masks), Some(&prompt), data, cfg.batch_size)?;
    let source_logits = output_dim(graph)?;
    let mut popt = Optimizer::new(&cfg.prompt);
    let mut trace = TrainTrace::default();
    let mut times = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr_p = cfg.prompt.lr_at(epoch, cfg.epochs);
        let started = Instant::now();
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        let mut seen = 0usize;
        for (step, idx) in
            epoch_batches(data.len(), cfg.batch_size, cfg.seed, epoch).iter().enumerate()
        {
            let (x, y) = data.batch(idx);
            let xp = prompt.apply(&x)?;
            let wants = GradWants { weights: false, input: true, masks: false };
            let tape = forward(graph, &xp, BnMode::Eval, Some(masks), wants)?;
            let mapped = label_map.gather(&tape.logits);
            let (loss, dmapped, corr) = nn::cross_entropy(&mapped, &y);
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, step, loss });
            }
            let dlogits = label_map.scatter(&dmapped, source_logits);
            let grads = backward(graph, &tape, &dlogits)?;
            let dprompt =
                prompt.apply_backward(grads.input.as_ref().expect("input gradient requested"));
            prompt_step(&mut popt, lr_p, &mut prompt, &dprompt);
            loss_sum += loss * y.len() as f64;
            correct += corr;
            seen += y.len();
        }
        times.push(started.elapsed().as_secs_f64());
        trace.epoch_loss.push(loss_sum / seen.max(1) as f64);
        trace.epoch_acc.push(100.0 * correct as f64 / seen.max(1) as f64);
    }
    trace.epoch_time_s =
        if times.is_empty() { 0.0 } else { times.iter().sum::<f64>() / times.len() as f64 };
    Ok((prompt, label_map, trace))
}

// ---------------------------------------------------------------- stage 2

/// Everything stage 2 produces. `graph` carries the fine-tuned weights in
/// dense storage; `final_acc` is measured on the physically extracted
/// subnetwork.
#[derive(Debug)]
pub struct Stage2Result {
    pub graph: ModelGraph,
    pub prompt: VisualPrompt,
    pub label_map: LabelMap,
    pub trace: TrainTrace,
    /// Test accuracy after each epoch (masked model).
    pub test_acc: Vec<f64>,
    /// Test accuracy of the extracted subnetwork after the last epoch.
    pub final_acc: f64,
    /// Multiply-accumulates of the pruned model.
    pub flops: u64,
    /// Parameter count of the pruned model.
    pub params: u64,
}

/// Fine-tune surviving weights and the prompt under a fixed mask set. The
/// label map is rebuilt at entry against the masked model with the learned
/// prompt; batch norm runs in training mode with running statistics
/// refreshed every step. Channels the masks zeroed receive no gradient and
/// no decay, so they stay exactly zero.
pub fn stage2_finetune(
    graph: &ModelGraph,
    masks: &MaskSet,
    train: &Dataset,
    test: &Dataset,
    mut prompt: VisualPrompt,
    cfg: &Stage2Config,
) -> Result<Stage2Result> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("cannot train on an empty dataset".into()));
    }
    masks.validate(graph)?;
    let mut g = apply_masks(graph, masks)?;
    let label_map = build_flm(&g, Some(masks), Some(&prompt), train, cfg.batch_size)?;
    let source_logits = output_dim(&g)?;
    let mut popt = Optimizer::new(&cfg.prompt);
    let mut wopt = Optimizer::new(&cfg.weights);
    let mut trace = TrainTrace::default();
    let mut test_acc = Vec::with_capacity(cfg.epochs);
    let mut times = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr_p = cfg.prompt.lr_at(epoch, cfg.epochs);
        let lr_w = cfg.weights.lr_at(epoch, cfg.epochs);
        let started = Instant::now();
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        let mut seen = 0usize;
        for (step, idx) in
            epoch_batches(train.len(), cfg.batch_size, cfg.seed, epoch).iter().enumerate()
        {
            let (x, y) = train.batch(idx);
            let xp = prompt.apply(&x)?;
            let tape =
                forward(&g, &xp, BnMode::Train, Some(masks), GradWants::WEIGHTS_AND_INPUT)?;
            let mapped = label_map.gather(&tape.logits);
            let (loss, dmapped, corr) = nn::cross_entropy(&mapped, &y);
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, step, loss });
            }
            let dlogits = label_map.scatter(&dmapped, source_logits);
            let grads = backward(&g, &tape, &dlogits)?;
            update_running_stats(&mut g, &tape);
            graph_step(&mut wopt, lr_w, &mut g, &grads);
            let dprompt =
                prompt.apply_backward(grads.input.as_ref().expect("input gradient requested"));
            prompt_step(&mut popt, lr_p, &mut prompt, &dprompt);
            loss_sum += loss * y.len() as f64;
            correct += corr;
            seen += y.len();
        }
        times.push(started.elapsed().as_secs_f64());
        trace.epoch_loss.push(loss_sum / seen.max(1) as f64);
        trace.epoch_acc.push(100.0 * correct as f64 / seen.max(1) as f64);
        test_acc.push(evaluate(&g, Some(masks), Some(&prompt), Some(&label_map), test, cfg.batch_size)?.1);
    }
    trace.epoch_time_s =
        if times.is_empty() { 0.0 } else { times.iter().sum::<f64>() / times.len() as f64 };
    let sub = extract_subnetwork(&g, masks)?;
    let final_acc =
        evaluate(&sub, None, Some(&prompt), Some(&label_map), test, cfg.batch_size)?.1;
    let flops = crate::analysis::count_flops(&g, Some(masks))?.total_masked;
    let params = g.param_count_masked(masks)? as u64;
    Ok(Stage2Result {
        graph: g,
        prompt,
        label_map,
        trace,
        test_acc,
        final_acc,
        flops,
        params,
    })
}

// --------------------------------------------------------------- transfer

/// Reuse masks found on one task for another: fresh prompt, fresh label
/// map, standard fine-tuning on the new task under the old masks.
pub fn transfer_masks(
    graph: &ModelGraph,
    masks_from_source: &MaskSet,
    train: &Dataset,
    test: &Dataset,
    fresh_prompt: VisualPrompt,
    cfg: &Stage2Config,
) -> Result<Stage2Result> {
    stage2_finetune(graph, masks_from_source, train, test, fresh_prompt, cfg)
}

/// Reuse a trained mask generator on a new task: stage 1 runs in
/// prompt-adaptation mode (generator and its encoder frozen, only the
/// prompt learns, masks regenerated each step), then stage 2 fine-tunes
/// under the adapted masks.
pub fn transfer_hypernet(
    graph: &ModelGraph,
    hypernet: &HypernetState,
    train: &Dataset,
    test: &Dataset,
    fresh_prompt: VisualPrompt,
    s1: &Stage1Config,
    s2: &Stage2Config,
    sparsity: f32,
    allocation: Allocation,
) -> Result<(Stage1Result, Stage2Result)> {
    let mut adapted = hypernet.clone();
    let (prompt, masks, label_map, trace) =
        stage1_inner(graph, train, fresh_prompt, &mut adapted, false, s1, sparsity, allocation)?;
    let stage2 = stage2_finetune(graph, &masks, train, test, prompt.clone(), s2)?;
    let stage1 = Stage1Result { prompt, hypernet: adapted, masks, label_map, trace };
    Ok((stage1, stage2))
}

// --------------------------------------------------------------- pretrain

/// A dense source model plus its training history.
#[derive(Debug)]
pub struct PretrainResult {
    pub graph: ModelGraph,
    pub trace: TrainTrace,
    pub test_acc: f64,
}

/// Ordinary supervised training of the dense backbone (no prompt, no
/// masks, identity label map) — produces the source model the pruning
/// stages start from.
pub fn pretrain(
    graph: ModelGraph,
    train: &Dataset,
    test: &Dataset,
    optim: &OptimConfig,
    epochs: usize,
    batch_size: usize,
    seed: u64,
) -> Result<PretrainResult> {
    optim.validate()?;
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if train.is_empty() {
        return Err(Error::Data("cannot train on an empty dataset".into()));
    }
    let mut g = graph;
    if output_dim(&g)? < train.num_classes {
        return Err(Error::Config(format!(
            "graph emits {} logits but the dataset has {} classes",
            output_dim(&g)?,
            train.num_classes
        )));
    }
    let mut wopt = Optimizer::new(optim);
    let mut trace = TrainTrace::default();
    let mut times = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let lr = optim.lr_at(epoch, epochs);
        let started = Instant::now();
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        let mut seen = 0usize;
        for (step, idx) in epoch_batches(train.len(), batch_size, seed, epoch).iter().enumerate()
        {
            let (x, y) = train.batch(idx);
            let tape = forward(&g, &x, BnMode::Train, None, GradWants::WEIGHTS)?;
            let (loss, dlogits, corr) = nn::cross_entropy(&tape.logits, &y);
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, step, loss });
            }
            let grads = backward(&g, &tape, &dlogits)?;
            update_running_stats(&mut g, &tape);
            graph_step(&mut wopt, lr, &mut g, &grads);
            loss_sum += loss * y.len() as f64;
            correct += corr;
            seen += y.len();
        }
        times.push(started.elapsed().as_secs_f64());
        trace.epoch_loss.push(loss_sum / seen.max(1) as f64);
        trace.epoch_acc.push(100.0 * correct as f64 / seen.max(1) as f64);
    }
    trace.epoch_time_s =
        if times.is_empty() { 0.0 } else { times.iter().sum::<f64>() / times.len() as f64 };
    let test_acc = evaluate(&g, None, None, None, test, batch_size)?.1;
    Ok(PretrainResult { graph: g, trace, test_acc })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_task, TaskSpec};
    use crate::hypernet::{generate_maskset, HypernetConfig};
    use crate::netgraph::build_graph;

    fn toy_setup(classes: usize) -> (ModelGraph, Dataset, Dataset) {
        let graph = build_graph("toy", classes, 7).unwrap();
        let spec = TaskSpec { image_hw: (16, 16), ..TaskSpec::new("t", classes, 20, 8, 42) };
        let (train, test) = make_task(&spec).unwrap();
        (graph, train, test)
    }

    fn tiny_stage1(epochs: usize) -> Stage1Config {
        Stage1Config { epochs, batch_size: 16, ..Stage1Config::defaults(9) }
    }

    fn tiny_stage2(epochs: usize) -> Stage2Config {
        Stage2Config { epochs, batch_size: 16, ..Stage2Config::generic(9) }
    }

    #[test]
    fn label_map_gather_scatter_roundtrip() {
        let map = LabelMap { mapping: vec![2, 0], method: MapMethod::Flm };
        map.validate(3).unwrap();
        let logits = ndarray::array![[1.0f32, 2.0, 3.0], [4.0, 5.0, 6.0]];
        let g = map.gather(&logits);
        assert_eq!(g, ndarray::array![[3.0f32, 1.0], [6.0, 4.0]]);
        let back = map.scatter(&g, 3);
        assert_eq!(back, ndarray::array![[1.0f32, 0.0, 3.0], [4.0, 0.0, 6.0]]);
        let dup = LabelMap { mapping: vec![1, 1], method: MapMethod::Flm };
        assert!(dup.validate(3).is_err());
        assert!(LabelMap { mapping: vec![5], method: MapMethod::Flm }.validate(3).is_err());
    }

    #[test]
    fn greedy_assignment_prefers_support_then_low_indices() {
        // Clear winners first.
        assert_eq!(assign_from_counts(&[vec![5, 1], vec![4, 0]], 2), vec![0, 1]);
        // Cross assignment when the diagonal is weak.
        assert_eq!(assign_from_counts(&[vec![0, 3], vec![3, 0]], 2), vec![1, 0]);
        // Ties break toward the lower source index.
        assert_eq!(assign_from_counts(&[vec![2, 2], vec![0, 0]], 2), vec![0, 1]);
        // A class with no support still gets an unused logit.
        assert_eq!(assign_from_counts(&[vec![0, 0, 0], vec![0, 9, 0]], 3), vec![0, 1]);
    }

    #[test]
    fn flm_is_deterministic_and_injective() {
        let (graph, train, _) = toy_setup(3);
        let a = build_flm(&graph, None, None, &train, 16).unwrap();
        let b = build_flm(&graph, None, None, &train, 16).unwrap();
        assert_eq!(a, b);
        a.validate(10).unwrap();
        assert_eq!(a.method, MapMethod::Flm);
        assert_eq!(a.mapping.len(), 3);
    }

    #[test]
    fn flm_rejects_too_many_classes() {
        let (graph, _, _) = toy_setup(3);
        let spec = TaskSpec { image_hw: (16, 16), ..TaskSpec::new("wide", 12, 2, 1, 1) };
        let (train, _) = make_task(&spec).unwrap();
        // toy graph emits 3 logits here? No: built with 3 classes -> 3+ logits.
        assert!(matches!(
            build_flm(&graph, None, None, &train, 16),
            Err(Error::LabelMap(_))
        ));
    }

    #[test]
    fn stage1_trains_without_touching_the_backbone() {
        let (graph, train, _) = toy_setup(3);
        let before = graph_params_hash(&graph);
        let hcfg = HypernetConfig::for_graph(&graph, Allocation::Uniform);
        let hn = HypernetState::new(&graph, hcfg, 11).unwrap();
        let prompt = VisualPrompt::additive(3, (16, 16), 4, Default::default()).unwrap();
        let out = stage1_learn(
            &graph,
            &train,
            prompt,
            hn,
            &tiny_stage1(2),
            0.3,
            Allocation::Uniform,
        )
        .unwrap();
        assert_eq!(graph_params_hash(&graph), before);
        assert_eq!(out.trace.epoch_loss.len(), 2);
        assert!(out.trace.epoch_loss.iter().all(|l| l.is_finite()));
        out.masks.validate(&graph).unwrap();
        out.label_map.validate(10).unwrap();
    }

    #[test]
    fn stage1_zero_epochs_returns_the_initial_masks() {
        let (graph, train, _) = toy_setup(3);
        let hcfg = HypernetConfig::for_graph(&graph, Allocation::Uniform);
        let hn = HypernetState::new(&graph, hcfg.clone(), 11).unwrap();
        let prompt = VisualPrompt::additive(3, (16, 16), 4, Default::default()).unwrap();
        let expect =
            generate_maskset(&graph, &hn, &prompt, 0.3, Allocation::Uniform).unwrap();
        let out = stage1_learn(
            &graph,
            &train,
            prompt,
            hn,
            &tiny_stage1(0),
            0.3,
            Allocation::Uniform,
        )
        .unwrap();
        assert_eq!(out.masks.to_json_string(), expect.to_json_string());
        assert_eq!(out.trace.epoch_time_s, 0.0);
    }

    #[test]
    fn stage1_is_reproducible() {
        let (graph, train, _) = toy_setup(3);
        let run = || {
            let hcfg = HypernetConfig::for_graph(&graph, Allocation::Global);
            let hn = HypernetState::new(&graph, hcfg, 11).unwrap();
            let prompt =
                VisualPrompt::additive(3, (16, 16), 4, Default::default()).unwrap();
            stage1_learn(&graph, &train, prompt, hn, &tiny_stage1(2), 0.4, Allocation::Global)
                .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.masks.to_json_string(), b.masks.to_json_string());
        for (x, y) in a.trace.epoch_loss.iter().zip(&b.trace.epoch_loss) {
            assert!((x - y).abs() <= 1e-6, "{x} vs {y}");
        }
        for (x, y) in a.trace.epoch_acc.iter().zip(&b.trace.epoch_acc) {
            assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn stage2_keeps_masked_channels_silent_and_masks_fixed() {
        let (graph, train, test) = toy_setup(3);
        let spec = crate::baselines::BaselineSpec {
            method: crate::baselines::BaselineMethod::Random,
            s: 0.5,
            allocation: Allocation::Uniform,
            seed: 3,
        };
        let masks = crate::baselines::baseline_masks(&graph, &spec).unwrap();
        let mask_json = masks.to_json_string();
        let out =
            stage2_finetune(&graph, &masks, &train, &test, zero_prompt(), &tiny_stage2(2))
                .unwrap();
        assert_eq!(masks.to_json_string(), mask_json);
        // Every masked channel's parameters are exactly zero after training.
        for layer in out.graph.layers().iter().filter(|l| l.prunable) {
            let bits = &masks.get(&layer.id).unwrap().bits;
            let node = out.graph.node_by_id(&layer.id).unwrap();
            if let crate::netgraph::Op::Conv(c) = &node.op {
                for (j, &bit) in bits.iter().enumerate() {
                    if bit == 0 {
                        assert!(
                            c.w.index_axis(ndarray::Axis(0), j).iter().all(|&v| v == 0.0),
                            "{}[{}] regrew weight",
                            layer.id,
                            j
                        );
                        if let Some(bn) = &c.bn {
                            assert_eq!(bn.gamma[j], 0.0);
                            assert_eq!(bn.beta[j], 0.0);
                        }
                    }
                }
            }
        }
        // The extracted network agrees with the masked evaluation.
        let masked_acc = *out.test_acc.last().unwrap();
        assert!((out.final_acc - masked_acc).abs() < 1e-3, "{} vs {masked_acc}", out.final_acc);
        assert!(out.flops > 0 && out.params > 0);
    }

    fn zero_prompt() -> VisualPrompt {
        VisualPrompt::additive(3, (16, 16), 4, Default::default()).unwrap()
    }

    #[test]
    fn pretraining_reduces_loss_on_the_synthetic_task() {
        let (graph, train, test) = toy_setup(3);
        let optim = OptimConfig::sgd(0.02, 5e-4, Schedule::Cosine);
        let out = pretrain(graph, &train, &test, &optim, 4, 16, 5).unwrap();
        assert_eq!(out.trace.epoch_loss.len(), 4);
        assert!(
            out.trace.epoch_loss.last().unwrap() < out.trace.epoch_loss.first().unwrap(),
            "loss should fall: {:?}",
            out.trace.epoch_loss
        );
    }

    #[test]
    fn hypernet_transfer_freezes_the_generator() {
        let (graph, train, test) = toy_setup(3);
        let hcfg = HypernetConfig::for_graph(&graph, Allocation::Uniform);
        let hn = HypernetState::new(&graph, hcfg, 11).unwrap();
        let before = hypernet_params_hash(&hn, None);
        let (s1, s2) = transfer_hypernet(
            &graph,
            &hn,
            &train,
            &test,
            zero_prompt(),
            &tiny_stage1(1),
            &tiny_stage2(1),
            0.3,
            Allocation::Uniform,
        )
        .unwrap();
        assert_eq!(hypernet_params_hash(&s1.hypernet, None), before);
        // The prompt did adapt.
        assert!(s1.prompt.params.iter().any(|&v| v != 0.0));
        s1.masks.validate(&graph).unwrap();
        assert!(s2.final_acc.is_finite());
    }

    #[test]
    fn record_csv_appends_idempotently() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("record.csv");
        let mut rec = RunRecord {
            task: "t".into(),
            arch: "toy".into(),
            method: "pass".into(),
            sparsity: 0.3,
            allocation: "uniform".into(),
            flops: 100,
            params: 50,
            acc: 80.0,
            seed: 1,
            epoch_time_s: 0.5,
            epoch_loss: vec![1.0],
            epoch_acc: vec![50.0],
            config_hash: "abc".into(),
        };
        append_record_csv(&path, &rec).unwrap();
        rec.acc = 85.0;
        append_record_csv(&path, &rec).unwrap();
        rec.seed = 2;
        append_record_csv(&path, &rec).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], RunRecord::csv_header());
        assert_eq!(lines.len(), 3, "{text}");
        assert!(lines[1].contains("85"));
        assert!(!text.contains("80"), "stale row survived: {text}");
    }

    #[test]
    fn config_hash_ignores_key_order() {
        let a: serde_json::Value =
            serde_json::from_str(r#"{"b": 1, "a": {"y": 2, "x": 3}}"#).unwrap();
        let b: serde_json::Value =
            serde_json::from_str(r#"{"a": {"x": 3, "y": 2}, "b": 1}"#).unwrap();
        assert_eq!(config_hash(&a), config_hash(&b));
        let c: serde_json::Value = serde_json::from_str(r#"{"b": 2}"#).unwrap();
        assert_ne!(config_hash(&a), config_hash(&c));
        assert_eq!(config_hash(&a).len(), 64);
    }

    #[test]
    fn params_hash_detects_single_element_changes() {
        let (graph, _, _) = toy_setup(3);
        let h0 = graph_params_hash(&graph);
        let mut g2 = graph.clone();
        if let crate::netgraph::Op::Conv(c) =
            &mut g2.node_by_id_mut("conv1").unwrap().op
        {
            c.w[[0, 0, 0, 0]] += 1e-7;
        }
        assert_ne!(graph_params_hash(&g2), h0);
    }
}

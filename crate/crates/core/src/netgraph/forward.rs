//! Forward and backward execution over a [`ModelGraph`].
//!
//! The forward pass records a [`Tape`] of per-node activations and caches;
//! the backward pass walks it in reverse. Channel masks are applied to
//! layer outputs (after bias, batch norm and activation), which keeps a
//! masked channel at exactly zero regardless of bias or normalization and
//! lets the backward pass expose a gradient for every mask bit.
//!
//! Batch-norm running statistics are never touched during execution; the
//! train-mode moments are kept on the tape and folded in explicitly via
//! [`update_running_stats`], so forward passes stay side-effect free.

use super::{BatchNorm, ChannelMask, Conv2d, MaskSet, ModelGraph, Op};
use crate::nn;
use crate::{Error, Result};
use ndarray::{Array1, Array2, Array4, Axis};
use std::collections::BTreeMap;

/// Batch-norm mode for a pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Which gradients the backward pass should produce. Unneeded gradients are
/// skipped, which matters: the mask-learning stage never differentiates the
/// frozen backbone weights, and plain training never needs input gradients.
#[derive(Debug, Clone, Copy)]
pub struct GradWants {
    pub weights: bool,
    pub input: bool,
    pub masks: bool,
}

impl GradWants {
    pub const WEIGHTS: Self = Self { weights: true, input: false, masks: false };
    pub const PROMPT_AND_MASKS: Self = Self { weights: false, input: true, masks: true };
    pub const WEIGHTS_AND_INPUT: Self = Self { weights: true, input: true, masks: false };
}

/// Per-layer parameter gradients.
#[derive(Debug, Default)]
pub struct LayerGrads {
    pub dw_conv: Option<Array4<f32>>,
    pub dw_lin: Option<Array2<f32>>,
    pub db: Option<Array1<f32>>,
    pub dgamma: Option<Array1<f32>>,
    pub dbeta: Option<Array1<f32>>,
}

/// Everything the backward pass produced.
#[derive(Debug, Default)]
pub struct Grads {
    pub layers: BTreeMap<String, LayerGrads>,
    pub input: Option<Array4<f32>>,
    /// d(loss)/d(mask bit) per prunable layer, one value per output channel.
    pub mask_bits: BTreeMap<String, Vec<f32>>,
}

/// Activation tape recorded by [`forward`].
pub struct Tape {
    mode: BnMode,
    wants: GradWants,
    outputs: Vec<Array4<f32>>,
    pre_bn: Vec<Option<Array4<f32>>>,
    bn_cache: Vec<Option<nn::BnCache>>,
    pre_mask: Vec<Option<Array4<f32>>>,
    pool_arg: Vec<Option<Array4<u32>>>,
    masks: Vec<Option<ChannelMask>>,
    pub logits: Array2<f32>,
}

impl Tape {
    /// Activation of a node by index (post mask, post activation).
    pub fn output(&self, node: usize) -> &Array4<f32> {
        &self.outputs[node]
    }
}

fn zero_masked_channels(a: &mut Array4<f32>, bits: &[u8]) {
    for (j, &b) in bits.iter().enumerate() {
        if b == 0 {
            a.index_axis_mut(Axis(1), j).fill(0.0);
        }
    }
}

fn conv_node_forward(
    c: &Conv2d,
    x: &Array4<f32>,
    mode: BnMode,
    keep_pre_bn: bool,
) -> Result<(Array4<f32>, Option<Array4<f32>>, Option<nn::BnCache>)> {
    let z0 = nn::conv2d_forward(x, &c.w, c.b.as_ref(), c.stride, c.padding)?;
    let (mut z, pre_bn, cache) = match (&c.bn, mode) {
        (Some(bn), BnMode::Train) => {
            let (y, cache) = nn::bn_train_forward(&z0, &bn.gamma, &bn.beta, bn.eps);
            (y, Some(z0), Some(cache))
        }
        (Some(bn), BnMode::Eval) => {
            let y = nn::bn_eval_forward(
                &z0,
                &bn.gamma,
                &bn.beta,
                &bn.running_mean,
                &bn.running_var,
                bn.eps,
            );
            (y, keep_pre_bn.then_some(z0), None)
        }
        (None, _) => (z0, None, None),
    };
    if c.relu {
        z.mapv_inplace(|v| v.max(0.0));
    }
    Ok((z, pre_bn, cache))
}

/// Run the graph on a batch, recording whatever the requested backward pass
/// will need. Masks, when given, gate the output channels of prunable
/// layers.
pub fn forward(
    graph: &ModelGraph,
    x: &Array4<f32>,
    mode: BnMode,
    masks: Option<&MaskSet>,
    wants: GradWants,
) -> Result<Tape> {
    let n = graph.nodes().len();
    let (ci, h, w) = graph.input_shape;
    if x.dim().1 != ci || x.dim().2 != h || x.dim().3 != w {
        return Err(Error::Shape(format!(
            "input {:?} does not match the graph's expected {:?}",
            x.dim(),
            graph.input_shape
        )));
    }
    if let Some(m) = masks {
        m.validate(graph)?;
    }

    let mut outputs: Vec<Array4<f32>> = Vec::with_capacity(n);
    let mut pre_bn: Vec<Option<Array4<f32>>> = Vec::with_capacity(n);
    let mut bn_cache: Vec<Option<nn::BnCache>> = Vec::with_capacity(n);
    let mut pre_mask_v: Vec<Option<Array4<f32>>> = Vec::with_capacity(n);
    let mut pool_arg: Vec<Option<Array4<u32>>> = Vec::with_capacity(n);
    let mut node_masks: Vec<Option<ChannelMask>> = Vec::with_capacity(n);

    for node in graph.nodes() {
        let mask = masks.and_then(|m| m.get(&node.id)).cloned();
        let (out, pb, bc, pm, pa) = match &node.op {
            Op::Input => (x.clone(), None, None, None, None),
            Op::Conv(c) => {
                let keep_pre = c.bn.is_some() && (mode == BnMode::Train || wants.weights);
                let (mut z, pb, bc) =
                    conv_node_forward(c, &outputs[node.inputs[0]], mode, keep_pre)?;
                let pm = match &mask {
                    Some(m) => {
                        let pm = wants.masks.then(|| z.clone());
                        zero_masked_channels(&mut z, &m.bits);
                        pm
                    }
                    None => None,
                };
                (z, pb, bc, pm, None)
            }
            Op::Linear(l) => {
                let xin = &outputs[node.inputs[0]];
                let (b, c, hh, ww) = xin.dim();
                let x2 = xin
                    .view()
                    .into_shape_with_order((b, c * hh * ww))
                    .map_err(|e| Error::Shape(e.to_string()))?;
                let mut y = nn::linear_forward(&x2.to_owned(), &l.w, l.b.as_ref())?;
                if l.relu {
                    y.mapv_inplace(|v| v.max(0.0));
                }
                let o = y.len_of(Axis(1));
                let y4 = y
                    .into_shape_with_order((b, o, 1, 1))
                    .map_err(|e| Error::Shape(e.to_string()))?;
                (y4, None, None, None, None)
            }
            Op::Add { relu } => {
                let mut acc = outputs[node.inputs[0]].clone();
                for &i in &node.inputs[1..] {
                    acc += &outputs[i];
                }
                if *relu {
                    acc.mapv_inplace(|v| v.max(0.0));
                }
                (acc, None, None, None, None)
            }
            Op::MaxPool { k, stride, padding } => {
                let (y, arg) = nn::maxpool_forward(&outputs[node.inputs[0]], *k, *stride, *padding)?;
                (y, None, None, None, Some(arg))
            }
            Op::GlobalAvgPool => {
                let xin = &outputs[node.inputs[0]];
                let y = nn::gap_forward(xin);
                let (b, c) = y.dim();
                (
                    y.into_shape_with_order((b, c, 1, 1))
                        .map_err(|e| Error::Shape(e.to_string()))?,
                    None,
                    None,
                    None,
                    None,
                )
            }
            Op::Flatten => {
                let xin = &outputs[node.inputs[0]];
                let (b, c, hh, ww) = xin.dim();
                (
                    xin.clone()
                        .into_shape_with_order((b, c * hh * ww, 1, 1))
                        .map_err(|e| Error::Shape(e.to_string()))?,
                    None,
                    None,
                    None,
                    None,
                )
            }
        };
        outputs.push(out);
        pre_bn.push(pb);
        bn_cache.push(bc);
        pre_mask_v.push(pm);
        pool_arg.push(pa);
        node_masks.push(mask);
    }

    let last = &outputs[n - 1];
    let (b, c, lh, lw) = last.dim();
    if (lh, lw) != (1, 1) || c != graph.classes {
        return Err(Error::Shape(format!(
            "graph output is ({c},{lh},{lw}); expected ({},1,1)",
            graph.classes
        )));
    }
    let logits = last
        .clone()
        .into_shape_with_order((b, c))
        .map_err(|e| Error::Shape(e.to_string()))?;

    Ok(Tape {
        mode,
        wants,
        outputs,
        pre_bn,
        bn_cache,
        pre_mask: pre_mask_v,
        pool_arg,
        masks: node_masks,
        logits,
    })
}

/// Convenience eval pass: logits only, minimal caching.
pub fn logits_of(graph: &ModelGraph, x: &Array4<f32>, masks: Option<&MaskSet>) -> Result<Array2<f32>> {
    let wants = GradWants { weights: false, input: false, masks: false };
    Ok(forward(graph, x, BnMode::Eval, masks, wants)?.logits)
}

fn accumulate(buf: &mut Option<Array4<f32>>, g: Array4<f32>) {
    match buf {
        Some(b) => *b += &g,
        None => *buf = Some(g),
    }
}

/// Backward pass over a recorded tape. `dlogits` is d(loss)/d(logits).
pub fn backward(graph: &ModelGraph, tape: &Tape, dlogits: &Array2<f32>) -> Result<Grads> {
    let n = graph.nodes().len();
    let wants = tape.wants;
    let (b, c) = dlogits.dim();
    if (b, c) != tape.logits.dim() {
        return Err(Error::Shape("dlogits does not match the tape".into()));
    }
    let mut gbuf: Vec<Option<Array4<f32>>> = (0..n).map(|_| None).collect();
    gbuf[n - 1] = Some(
        dlogits
            .clone()
            .into_shape_with_order((b, c, 1, 1))
            .map_err(|e| Error::Shape(e.to_string()))?,
    );

    let mut grads = Grads::default();

    for i in (0..n).rev() {
        let Some(mut g) = gbuf[i].take() else { continue };
        let node = graph.node(i);
        match &node.op {
            Op::Input => {
                if wants.input {
                    accumulate(&mut grads.input, g);
                }
            }
            Op::Conv(conv) => {
                if let Some(mask) = &tape.masks[i] {
                    if wants.masks {
                        let z2 = tape.pre_mask[i]
                            .as_ref()
                            .expect("mask gradients requested but pre-mask not cached");
                        let co = mask.bits.len();
                        let mut dm = vec![0.0f32; co];
                        for (j, slot) in dm.iter_mut().enumerate() {
                            let gj = g.index_axis(Axis(1), j);
                            let zj = z2.index_axis(Axis(1), j);
                            let mut acc = 0.0f64;
                            for (&gv, &zv) in gj.iter().zip(zj.iter()) {
                                acc += gv as f64 * zv as f64;
                            }
                            *slot = acc as f32;
                        }
                        grads.mask_bits.insert(node.id.clone(), dm);
                    }
                    zero_masked_channels(&mut g, &mask.bits);
                }
                if conv.relu {
                    // Masked channels already carry zero gradient, so gating
                    // on the post-mask output is equivalent to gating on the
                    // pre-mask activation.
                    nn::relu_backward(&mut g, &tape.outputs[i]);
                }
                let (dz0, dgamma, dbeta) = match &conv.bn {
                    Some(bn) => match tape.mode {
                        BnMode::Train => {
                            let cache = tape.bn_cache[i]
                                .as_ref()
                                .expect("train-mode conv missing bn cache");
                            let z0 = tape.pre_bn[i].as_ref().expect("missing pre-bn cache");
                            let (dx, dg, db) = nn::bn_train_backward(z0, &bn.gamma, cache, &g);
                            (dx, Some(dg), Some(db))
                        }
                        BnMode::Eval => {
                            if wants.weights {
                                let z0 =
                                    tape.pre_bn[i].as_ref().expect("missing pre-bn cache");
                                let (dx, dg, db) = nn::bn_eval_backward(
                                    z0,
                                    &bn.gamma,
                                    &bn.running_mean,
                                    &bn.running_var,
                                    bn.eps,
                                    &g,
                                );
                                (dx, Some(dg), Some(db))
                            } else {
                                // dx = dy * gamma/sqrt(var+eps), channel-wise.
                                let mut dx = g;
                                for j in 0..bn.gamma.len() {
                                    let a = bn.gamma[j] / (bn.running_var[j] + bn.eps).sqrt();
                                    dx.index_axis_mut(Axis(1), j).mapv_inplace(|v| v * a);
                                }
                                (dx, None, None)
                            }
                        }
                    },
                    None => (g, None, None),
                };

                let src = node.inputs[0];
                let src_is_input = matches!(graph.node(src).op, Op::Input);
                let want_dx = !src_is_input || wants.input;
                let cg = nn::conv2d_backward(
                    &tape.outputs[src],
                    &conv.w,
                    &dz0,
                    conv.stride,
                    conv.padding,
                    want_dx,
                    wants.weights,
                )?;
                if wants.weights {
                    grads.layers.insert(
                        node.id.clone(),
                        LayerGrads {
                            dw_conv: cg.dw,
                            dw_lin: None,
                            db: conv.b.as_ref().map(|_| cg.db.clone().unwrap()),
                            dgamma,
                            dbeta,
                        },
                    );
                }
                if let Some(dx) = cg.dx {
                    accumulate(&mut gbuf[src], dx);
                }
            }
            Op::Linear(l) => {
                let (bb, oo, _, _) = g.dim();
                let mut g2 = g
                    .into_shape_with_order((bb, oo))
                    .map_err(|e| Error::Shape(e.to_string()))?;
                if l.relu {
                    let y = &tape.outputs[i];
                    let y2 = y
                        .view()
                        .into_shape_with_order((bb, oo))
                        .map_err(|e| Error::Shape(e.to_string()))?;
                    g2.zip_mut_with(&y2, |d, &v| {
                        if v <= 0.0 {
                            *d = 0.0;
                        }
                    });
                }
                let src = node.inputs[0];
                let xin = &tape.outputs[src];
                let (xb, xc, xh, xw) = xin.dim();
                let x2 = xin
                    .view()
                    .into_shape_with_order((xb, xc * xh * xw))
                    .map_err(|e| Error::Shape(e.to_string()))?
                    .to_owned();
                let (dx2, dw, db) = nn::linear_backward(&x2, &l.w, &g2);
                if wants.weights {
                    grads.layers.insert(
                        node.id.clone(),
                        LayerGrads {
                            dw_conv: None,
                            dw_lin: Some(dw),
                            db: l.b.as_ref().map(|_| db),
                            dgamma: None,
                            dbeta: None,
                        },
                    );
                }
                let src_is_input = matches!(graph.node(src).op, Op::Input);
                if !src_is_input || wants.input {
                    let dx = dx2
                        .into_shape_with_order((xb, xc, xh, xw))
                        .map_err(|e| Error::Shape(e.to_string()))?;
                    accumulate(&mut gbuf[src], dx);
                }
            }
            Op::Add { relu } => {
                if *relu {
                    nn::relu_backward(&mut g, &tape.outputs[i]);
                }
                let inputs = node.inputs.clone();
                for &src in &inputs[..inputs.len() - 1] {
                    accumulate(&mut gbuf[src], g.clone());
                }
                accumulate(&mut gbuf[*inputs.last().unwrap()], g);
            }
            Op::MaxPool { .. } => {
                let src = node.inputs[0];
                let arg = tape.pool_arg[i].as_ref().expect("maxpool missing argmax");
                let dx = nn::maxpool_backward(&g, arg, tape.outputs[src].dim());
                accumulate(&mut gbuf[src], dx);
            }
            Op::GlobalAvgPool => {
                let src = node.inputs[0];
                let (bb, cc, _, _) = g.dim();
                let g2 = g
                    .into_shape_with_order((bb, cc))
                    .map_err(|e| Error::Shape(e.to_string()))?;
                let dx = nn::gap_backward(&g2, tape.outputs[src].dim());
                accumulate(&mut gbuf[src], dx);
            }
            Op::Flatten => {
                let src = node.inputs[0];
                let dx = g
                    .into_shape_with_order(tape.outputs[src].dim())
                    .map_err(|e| Error::Shape(e.to_string()))?;
                accumulate(&mut gbuf[src], dx);
            }
        }
    }
    Ok(grads)
}

/// Fold the train-mode batch moments recorded on a tape into the graph's
/// running statistics. Call once per optimization step.
pub fn update_running_stats(graph: &mut ModelGraph, tape: &Tape) {
    if tape.mode != BnMode::Train {
        return;
    }
    for i in 0..graph.nodes().len() {
        let Some(cache) = tape.bn_cache[i].as_ref() else { continue };
        let (b, _, h, w) = tape.outputs[i].dim();
        let node = graph.node_mut(i);
        if let Op::Conv(Conv2d { bn: Some(bn), .. }) = &mut node.op {
            let BatchNorm { running_mean, running_var, momentum, .. } = bn;
            nn::norm::bn_update_running(cache, b * h * w, *momentum, running_mean, running_var);
        }
    }
}

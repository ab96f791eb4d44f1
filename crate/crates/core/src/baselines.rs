//! Reference mask generators: group-L1 magnitude scores and random masks.
//!
//! Both respect coupling groups and the one-channel-minimum guard, and both
//! produce the same [`MaskSet`] shape as the learned generator, so every
//! downstream consumer (masked forward, FLOPs accounting, extraction) treats
//! them interchangeably.

use crate::hypernet::{allocate_budget, binarize, ChannelScores};
use crate::netgraph::{Allocation, ChannelMask, MaskSet, ModelGraph, Op};
use crate::{Error, Result};
use ndarray::{Array1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Which baseline to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    /// Magnitude criterion: per-channel L1 norm summed across the group.
    GroupL1,
    /// Seeded uniform-random keep sets (control).
    Random,
}

/// A baseline mask request.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineSpec {
    pub method: BaselineMethod,
    pub s: f32,
    pub allocation: Allocation,
    pub seed: u64,
}

/// Per-group channel scores: the L1 norm of each out-channel's weights,
/// summed over every member of the coupling group. Feeds the same budget
/// allocation and binarization path as the learned scores.
pub fn group_l1_scores(graph: &ModelGraph) -> Result<Vec<ChannelScores>> {
    let mut out = Vec::with_capacity(graph.groups().len());
    for group in graph.groups() {
        let mut values = Array1::<f64>::zeros(group.width);
        for member in group.layers.iter() {
            let node = graph
                .node_by_id(member)
                .ok_or_else(|| Error::UnknownLayer(member.clone()))?;
            match &node.op {
                Op::Conv(c) => {
                    for (j, row) in c.w.axis_iter(Axis(0)).enumerate() {
                        values[j] += row.iter().map(|&v| v.abs() as f64).sum::<f64>();
                    }
                }
                Op::Linear(l) => {
                    for (j, row) in l.w.axis_iter(Axis(0)).enumerate() {
                        values[j] += row.iter().map(|&v| v.abs() as f64).sum::<f64>();
                    }
                }
                other => {
                    return Err(Error::UnknownLayer(format!(
                        "group member {member} is a {} node",
                        other.kind_str()
                    )))
                }
            }
        }
        out.push(ChannelScores {
            layer_id: group.layers[0].clone(),
            values: values.mapv(|v| v as f32),
        });
    }
    Ok(out)
}

/// Masks from the group-L1 criterion at sparsity `s`.
pub fn group_l1_masks(graph: &ModelGraph, s: f32, allocation: Allocation) -> Result<MaskSet> {
    let scores = group_l1_scores(graph)?;
    let keeps = allocate_budget(&scores, s, allocation)?;
    let masks = scores
        .iter()
        .map(|sc| binarize(sc, keeps[&sc.layer_id]))
        .collect::<Result<Vec<_>>>()?;
    MaskSet::from_group_masks(graph, &masks, s, allocation)
}

/// Seed-deterministic random keep sets, one per coupling group, at the
/// per-group budget keep = C_O - floor(s * C_O). Random selection has no
/// scores to pool, so the budget is always the uniform one.
pub fn random_masks(graph: &ModelGraph, s: f32, seed: u64) -> Result<MaskSet> {
    if !(s > 0.0 && s < 1.0) {
        return Err(Error::Config(format!("sparsity {s} outside (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masks = Vec::with_capacity(graph.groups().len());
    for group in graph.groups() {
        let pruned = (s as f64 * group.width as f64).floor() as usize;
        let keep = group.width - pruned;
        let chosen = rand::seq::index::sample(&mut rng, group.width, keep);
        let mut bits = vec![0u8; group.width];
        for i in chosen {
            bits[i] = 1;
        }
        masks.push(ChannelMask { bits });
    }
    MaskSet::from_group_masks(graph, &masks, s, Allocation::Uniform)
}

/// Run a [`BaselineSpec`].
pub fn baseline_masks(graph: &ModelGraph, spec: &BaselineSpec) -> Result<MaskSet> {
    match spec.method {
        BaselineMethod::GroupL1 => group_l1_masks(graph, spec.s, spec.allocation),
        BaselineMethod::Random => random_masks(graph, spec.s, spec.seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::{build_graph, Conv2d, Linear, Node};
    use ndarray::Array4;

    fn single_conv_graph(w: Array4<f32>) -> ModelGraph {
        let (co, ci, _, _) = w.dim();
        let nodes = vec![
            Node { id: "input".into(), op: Op::Input, inputs: vec![] },
            Node {
                id: "conv1".into(),
                op: Op::Conv(Conv2d {
                    w,
                    b: Some(Array1::zeros(co)),
                    bn: None,
                    stride: 1,
                    padding: 0,
                    relu: true,
                }),
                inputs: vec![0],
            },
            Node { id: "avgpool".into(), op: Op::GlobalAvgPool, inputs: vec![1] },
            Node {
                id: "fc".into(),
                op: Op::Linear(Linear {
                    w: ndarray::Array2::ones((3, co)),
                    b: None,
                    in_channels: co,
                    spatial: 1,
                    relu: false,
                }),
                inputs: vec![2],
            },
        ];
        ModelGraph::new("single", (ci, 4, 4), 3, nodes).unwrap()
    }

    #[test]
    fn l1_scores_are_absolute_sums_per_out_channel() {
        let mut w = Array4::<f32>::zeros((2, 2, 1, 1));
        w[[0, 0, 0, 0]] = 1.0;
        w[[0, 1, 0, 0]] = -3.0;
        w[[1, 0, 0, 0]] = 2.0;
        w[[1, 1, 0, 0]] = 6.0;
        let graph = single_conv_graph(w);
        let scores = group_l1_scores(&graph).unwrap();
        assert_eq!(scores.len(), 1);
        assert_eq!(scores[0].layer_id, "conv1");
        assert_eq!(scores[0].values.as_slice().unwrap(), &[4.0, 8.0]);
    }

    #[test]
    fn coupled_members_sum_into_one_score_vector() {
        // Two convs joined by an add: per-channel norms [1,2] and [3,0]
        // must pool to [4,2].
        let mut wa = Array4::<f32>::zeros((2, 3, 1, 1));
        wa[[0, 0, 0, 0]] = 1.0;
        wa[[1, 0, 0, 0]] = -2.0;
        let mut wb = Array4::<f32>::zeros((2, 3, 1, 1));
        wb[[0, 1, 0, 0]] = 3.0;
        let conv = |w: Array4<f32>| {
            Op::Conv(Conv2d { w, b: None, bn: None, stride: 1, padding: 0, relu: false })
        };
        let nodes = vec![
            Node { id: "input".into(), op: Op::Input, inputs: vec![] },
            Node { id: "a".into(), op: conv(wa), inputs: vec![0] },
            Node { id: "b".into(), op: conv(wb), inputs: vec![0] },
            Node { id: "add".into(), op: Op::Add { relu: true }, inputs: vec![1, 2] },
            Node { id: "avgpool".into(), op: Op::GlobalAvgPool, inputs: vec![3] },
            Node {
                id: "fc".into(),
                op: Op::Linear(Linear {
                    w: ndarray::Array2::ones((3, 2)),
                    b: None,
                    in_channels: 2,
                    spatial: 1,
                    relu: false,
                }),
                inputs: vec![4],
            },
        ];
        let graph = ModelGraph::new("pair", (3, 4, 4), 3, nodes).unwrap();
        let scores = group_l1_scores(&graph).unwrap();
        assert_eq!(scores.len(), 1);
        assert_eq!(scores[0].values.as_slice().unwrap(), &[4.0, 2.0]);
    }

    #[test]
    fn zero_weights_give_prefix_masks() {
        let graph = single_conv_graph(Array4::zeros((4, 2, 1, 1)));
        let m = group_l1_masks(&graph, 0.5, Allocation::Uniform).unwrap();
        assert_eq!(m.masks["conv1"].bits, vec![1, 1, 0, 0]);
    }

    #[test]
    fn l1_masks_ignore_positive_weight_scaling() {
        let graph = build_graph("toy", 4, 3).unwrap();
        let m1 = group_l1_masks(&graph, 0.4, Allocation::Global).unwrap();
        let mut scaled = graph.clone();
        for id in ["conv1", "conv2"] {
            if let Op::Conv(c) = &mut scaled.node_by_id_mut(id).unwrap().op {
                c.w.mapv_inplace(|v| v * 2.5);
            }
        }
        let m2 = group_l1_masks(&scaled, 0.4, Allocation::Global).unwrap();
        assert_eq!(m1.masks, m2.masks);
    }

    #[test]
    fn baseline_masks_validate_like_learned_ones() {
        let graph = build_graph("resnet18-tiny", 10, 5).unwrap();
        for spec in [
            BaselineSpec {
                method: BaselineMethod::GroupL1,
                s: 0.5,
                allocation: Allocation::Global,
                seed: 0,
            },
            BaselineSpec {
                method: BaselineMethod::Random,
                s: 0.5,
                allocation: Allocation::Uniform,
                seed: 9,
            },
        ] {
            let m = baseline_masks(&graph, &spec).unwrap();
            m.validate(&graph).unwrap();
        }
    }

    #[test]
    fn random_masks_are_seed_deterministic_and_budgeted() {
        let graph = build_graph("toy", 4, 3).unwrap();
        let a = random_masks(&graph, 0.5, 42).unwrap();
        let b = random_masks(&graph, 0.5, 42).unwrap();
        assert_eq!(a.masks, b.masks);
        let c = random_masks(&graph, 0.5, 43).unwrap();
        assert_ne!(a.masks, c.masks, "different seeds should move the masks");
        for g in graph.groups() {
            assert_eq!(a.masks[&g.layers[0]].kept(), g.width / 2);
        }
        let tiny = random_masks(&graph, 1e-3, 1).unwrap();
        assert!(tiny.masks.values().all(|m| m.bits.iter().all(|&b| b == 1)));
    }

    #[test]
    fn random_keep_frequency_matches_the_hypergeometric_rate() {
        let graph = single_conv_graph(Array4::zeros((8, 2, 1, 1)));
        let mut kept = [0u32; 8];
        let trials = 10_000;
        for seed in 0..trials {
            let m = random_masks(&graph, 0.5, seed).unwrap();
            for (i, &b) in m.masks["conv1"].bits.iter().enumerate() {
                kept[i] += b as u32;
            }
        }
        for (i, &k) in kept.iter().enumerate() {
            let f = k as f64 / trials as f64;
            assert!((f - 0.5).abs() < 0.02, "channel {i} kept at rate {f}");
        }
    }
}

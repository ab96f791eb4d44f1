//! Property tests for structural invariants: mask/extract equivalence,
//! selection budgets, top-k semantics, straight-through gradients, and
//! scale invariance of the magnitude baseline.

mod common;

use common::{max_abs_diff, random_graph, random_input};
use ndarray::Array1;
use promptprune::baselines::{baseline_masks, group_l1_masks, BaselineMethod, BaselineSpec};
use promptprune::hypernet::{allocate_budget, binarize, binarize_backward, ChannelScores};
use promptprune::netgraph::{apply_masks, extract_subnetwork, logits_of, Allocation, Op};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Zeroing masked channels and physically removing them is the same
    /// function.
    #[test]
    fn masked_equals_extracted(seed in 0u64..1000, mask_seed in 0u64..1000, s in 0.1f32..0.8) {
        let graph = random_graph(seed);
        let masks = baseline_masks(
            &graph,
            &BaselineSpec {
                method: BaselineMethod::Random,
                s,
                allocation: Allocation::Uniform,
                seed: mask_seed,
            },
        ).unwrap();
        let x = random_input(&graph, 2, seed.wrapping_add(mask_seed));
        let a = logits_of(&apply_masks(&graph, &masks).unwrap(), &x, None).unwrap();
        let b = logits_of(&extract_subnetwork(&graph, &masks).unwrap(), &x, None).unwrap();
        prop_assert!(max_abs_diff(&a, &b) <= 1e-5);
    }
}

fn arbitrary_scores() -> impl Strategy<Value = Vec<ChannelScores>> {
    prop::collection::vec(prop::collection::vec(-5.0f32..5.0, 1..24), 1..6).prop_map(|groups| {
        groups
            .into_iter()
            .enumerate()
            .map(|(i, values)| ChannelScores {
                layer_id: format!("g{i}"),
                values: Array1::from_vec(values),
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Uniform allocation prunes floor(s*w) channels from every group.
    #[test]
    fn uniform_budget_is_exact_per_group(scores in arbitrary_scores(), s in 0.01f32..0.99) {
        let keeps = allocate_budget(&scores, s, Allocation::Uniform).unwrap();
        for sc in &scores {
            let w = sc.values.len();
            let expected = w - (s as f64 * w as f64).floor() as usize;
            prop_assert_eq!(keeps[&sc.layer_id], expected);
        }
    }

    /// Global allocation prunes floor(s*total) channels overall, except
    /// that no group may lose its last channel.
    #[test]
    fn global_budget_is_exact_in_total(scores in arbitrary_scores(), s in 0.01f32..0.99) {
        let keeps = allocate_budget(&scores, s, Allocation::Global).unwrap();
        let total: usize = scores.iter().map(|sc| sc.values.len()).sum();
        let prunable: usize = scores.iter().map(|sc| sc.values.len() - 1).sum();
        let budget = ((s as f64 * total as f64).floor() as usize).min(prunable);
        let kept: usize = keeps.values().sum();
        prop_assert_eq!(kept, total - budget);
        for sc in &scores {
            prop_assert!(keeps[&sc.layer_id] >= 1, "group {} lost every channel", sc.layer_id);
        }
    }

    /// binarize keeps exactly the k best scores, ties resolved toward the
    /// lower channel index.
    #[test]
    fn binarize_keeps_the_top_k(values in prop::collection::vec(-5.0f32..5.0, 1..32)) {
        let n = values.len();
        let scores = ChannelScores { layer_id: "g".into(), values: Array1::from_vec(values.clone()) };
        for keep_k in 1..=n {
            let mask = binarize(&scores, keep_k).unwrap();
            prop_assert_eq!(mask.kept(), keep_k);
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
            for (rank, &idx) in order.iter().enumerate() {
                prop_assert_eq!(
                    mask.bits[idx] == 1,
                    rank < keep_k,
                    "channel {} at rank {} with keep_k {}", idx, rank, keep_k
                );
            }
        }
    }

    /// The straight-through estimator hands the upstream gradient through
    /// unchanged.
    #[test]
    fn ste_gradient_is_the_identity(values in prop::collection::vec(-10.0f32..10.0, 1..64)) {
        let upstream = Array1::from_vec(values);
        let through = binarize_backward(&upstream);
        prop_assert_eq!(through, upstream);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    /// Scaling every member of one coupling group by the same positive
    /// constant cannot change magnitude-based masks under per-group
    /// (uniform) allocation: the group's internal ranking is preserved.
    #[test]
    fn group_l1_uniform_masks_ignore_group_scale(seed in 0u64..200, scale in 0.05f32..20.0, s in 0.1f32..0.8) {
        let graph = random_graph(seed);
        let before = group_l1_masks(&graph, s, Allocation::Uniform).unwrap();
        let mut scaled = graph.clone();
        prop_assume!(!scaled.groups().is_empty());
        let members = scaled.groups()[0].layers.clone();
        for id in members {
            if let Some(node) = scaled.node_by_id_mut(&id) {
                if let Op::Conv(c) = &mut node.op {
                    c.w.mapv_inplace(|v| v * scale);
                }
            }
        }
        let after = group_l1_masks(&scaled, s, Allocation::Uniform).unwrap();
        prop_assert_eq!(before.masks, after.masks);
    }
}

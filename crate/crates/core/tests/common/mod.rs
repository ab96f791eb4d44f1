//! Shared helpers for integration tests: seeded random network graphs and
//! tensor comparison utilities.

use ndarray::{Array1, Array4};
use promptprune::netgraph::{
    BatchNorm, Conv2d, Linear, ModelGraph, Node, Op,
};
use promptprune::nn::{he_conv, he_linear};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A BN whose statistics and affine terms are genuinely non-trivial, so
/// equivalence tests cannot pass by accident.
fn random_bn(rng: &mut ChaCha8Rng, channels: usize) -> BatchNorm {
    let mut bn = BatchNorm::identity(channels);
    for c in 0..channels {
        bn.gamma[c] = rng.random_range(0.5..1.5);
        bn.beta[c] = rng.random_range(-0.3..0.3);
        bn.running_mean[c] = rng.random_range(-0.5..0.5);
        bn.running_var[c] = rng.random_range(0.5..2.0);
    }
    bn
}

fn random_conv(
    rng: &mut ChaCha8Rng,
    ci: usize,
    co: usize,
    k: usize,
    stride: usize,
    relu: bool,
) -> Op {
    let (b, bn) = if rng.random_bool(0.6) {
        (None, Some(random_bn(rng, co)))
    } else {
        let bias = Array1::from_iter((0..co).map(|_| rng.random_range(-0.2..0.2f32)));
        (Some(bias), None)
    };
    Op::Conv(Conv2d { w: he_conv(rng, co, ci, k), b, bn, stride, padding: k / 2, relu })
}

/// A random small but structurally varied CNN: a stem, then a few stages
/// that are each either a plain conv, a stride-2 conv, an identity-skip
/// residual pair, a projection-skip residual pair, or a max-pool, ending
/// in global average pooling and a classifier.
pub fn random_graph(seed: u64) -> ModelGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nodes = vec![Node { id: "input".into(), op: Op::Input, inputs: vec![] }];
    let push = |nodes: &mut Vec<Node>, id: String, op: Op, inputs: Vec<usize>| -> usize {
        nodes.push(Node { id, op, inputs });
        nodes.len() - 1
    };

    let mut hw = if rng.random_bool(0.5) { 16 } else { 8 };
    let hw0 = hw;
    let mut c = rng.random_range(4..9);
    let mut last = push(
        &mut nodes,
        "stem".into(),
        random_conv(&mut rng, 3, c, 3, 1, true),
        vec![0],
    );

    let stages = rng.random_range(1..4);
    for i in 0..stages {
        match rng.random_range(0..5) {
            0 => {
                let co = rng.random_range(4..13);
                let k = if rng.random_bool(0.5) { 3 } else { 1 };
                last = push(
                    &mut nodes,
                    format!("s{i}.conv"),
                    random_conv(&mut rng, c, co, k, 1, true),
                    vec![last],
                );
                c = co;
            }
            1 if hw >= 4 => {
                let co = rng.random_range(4..13);
                last = push(
                    &mut nodes,
                    format!("s{i}.down"),
                    random_conv(&mut rng, c, co, 3, 2, true),
                    vec![last],
                );
                c = co;
                hw /= 2;
            }
            2 => {
                // Identity-skip residual: widths are forced equal, so all
                // three producers land in one coupling group.
                let a = push(
                    &mut nodes,
                    format!("s{i}.a"),
                    random_conv(&mut rng, c, c, 3, 1, true),
                    vec![last],
                );
                let b = push(
                    &mut nodes,
                    format!("s{i}.b"),
                    random_conv(&mut rng, c, c, 3, 1, false),
                    vec![a],
                );
                last = push(
                    &mut nodes,
                    format!("s{i}.add"),
                    Op::Add { relu: true },
                    vec![last, b],
                );
            }
            3 if hw >= 4 => {
                // Projection-skip residual with a stride-2 main path.
                let co = rng.random_range(4..13);
                let a = push(
                    &mut nodes,
                    format!("s{i}.a"),
                    random_conv(&mut rng, c, co, 3, 2, true),
                    vec![last],
                );
                let b = push(
                    &mut nodes,
                    format!("s{i}.b"),
                    random_conv(&mut rng, co, co, 3, 1, false),
                    vec![a],
                );
                let skip = push(
                    &mut nodes,
                    format!("s{i}.skip"),
                    random_conv(&mut rng, c, co, 1, 2, false),
                    vec![last],
                );
                last = push(
                    &mut nodes,
                    format!("s{i}.add"),
                    Op::Add { relu: true },
                    vec![b, skip],
                );
                c = co;
                hw /= 2;
            }
            _ if hw >= 4 => {
                last = push(
                    &mut nodes,
                    format!("s{i}.pool"),
                    Op::MaxPool { k: 2, stride: 2, padding: 0 },
                    vec![last],
                );
                hw /= 2;
            }
            _ => {}
        }
    }

    let gap = push(&mut nodes, "gap".into(), Op::GlobalAvgPool, vec![last]);
    let flat = push(&mut nodes, "flatten".into(), Op::Flatten, vec![gap]);
    let classes = rng.random_range(2..7);
    push(
        &mut nodes,
        "fc".into(),
        Op::Linear(Linear {
            w: he_linear(&mut rng, classes, c),
            b: Some(Array1::from_iter((0..classes).map(|_| rng.random_range(-0.1..0.1f32)))),
            in_channels: c,
            spatial: 1,
            relu: false,
        }),
        vec![flat],
    );

    ModelGraph::new(format!("random-{seed}"), (3, hw0, hw0), classes, nodes)
        .expect("random graph must assemble")
}

/// A batch of `n` random images shaped for `graph`.
pub fn random_input(graph: &ModelGraph, n: usize, seed: u64) -> Array4<f32> {
    let (c, h, w) = graph.input_shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array4::from_shape_fn((n, c, h, w), |_| rng.random_range(-1.0..1.0f32))
}

pub fn max_abs_diff(a: &ndarray::Array2<f32>, b: &ndarray::Array2<f32>) -> f32 {
    assert_eq!(a.dim(), b.dim(), "logit shapes differ");
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

//! Architecture builders: residual networks (basic and bottleneck blocks),
//! VGG-16, and small test networks. Node ids follow the conventional
//! torch-style naming (`conv1`, `layer2.0.downsample`, `fc`) so masks and
//! reports read naturally.

use super::{BatchNorm, Conv2d, Linear, ModelGraph, Node, Op};
use crate::nn::{he_conv, he_linear};
use crate::{Error, Result};
use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

struct Builder {
    nodes: Vec<Node>,
    index: BTreeMap<String, usize>,
}

impl Builder {
    fn new() -> Self {
        let mut b = Self { nodes: Vec::new(), index: BTreeMap::new() };
        b.push("input", Op::Input, &[]);
        b
    }

    fn push(&mut self, id: &str, op: Op, inputs: &[&str]) -> String {
        let inputs = inputs
            .iter()
            .map(|i| *self.index.get(*i).unwrap_or_else(|| panic!("unknown node `{i}`")))
            .collect();
        self.index.insert(id.to_string(), self.nodes.len());
        self.nodes.push(Node { id: id.to_string(), op, inputs });
        id.to_string()
    }

    fn finish(
        self,
        name: &str,
        input_shape: (usize, usize, usize),
        classes: usize,
    ) -> Result<ModelGraph> {
        ModelGraph::new(name, input_shape, classes, self.nodes)
    }
}

fn conv_bn(
    rng: &mut ChaCha8Rng,
    ci: usize,
    co: usize,
    k: usize,
    stride: usize,
    padding: usize,
    relu: bool,
) -> Op {
    Op::Conv(Conv2d {
        w: he_conv(rng, co, ci, k),
        b: None,
        bn: Some(BatchNorm::identity(co)),
        stride,
        padding,
        relu,
    })
}

fn conv_bias(
    rng: &mut ChaCha8Rng,
    ci: usize,
    co: usize,
    k: usize,
    stride: usize,
    padding: usize,
    relu: bool,
) -> Op {
    Op::Conv(Conv2d {
        w: he_conv(rng, co, ci, k),
        b: Some(Array1::zeros(co)),
        bn: None,
        stride,
        padding,
        relu,
    })
}

fn linear(rng: &mut ChaCha8Rng, in_channels: usize, spatial: usize, out: usize, relu: bool) -> Op {
    Op::Linear(Linear {
        w: he_linear(rng, out, in_channels * spatial),
        b: Some(Array1::zeros(out)),
        in_channels,
        spatial,
        relu,
    })
}

/// Stem style for residual networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stem {
    /// 7x7 stride-2 conv followed by a 3x3 stride-2 max pool (224px inputs).
    ImageNet,
    /// Single 3x3 stride-1 conv (32px inputs).
    Cifar,
}

/// Residual network with basic (two-conv) blocks.
///
/// `widths` are the per-stage channel counts, `blocks` the per-stage block
/// counts ([2,2,2,2] and [3,4,6,3] give the 18- and 34-layer variants).
pub fn resnet_basic(
    name: &str,
    widths: [usize; 4],
    blocks: [usize; 4],
    stem: Stem,
    input_hw: usize,
    classes: usize,
    seed: u64,
) -> Result<ModelGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder::new();

    let mut prev = match stem {
        Stem::ImageNet => {
            b.push("conv1", conv_bn(&mut rng, 3, widths[0], 7, 2, 3, true), &["input"]);
            b.push("maxpool", Op::MaxPool { k: 3, stride: 2, padding: 1 }, &["conv1"])
        }
        Stem::Cifar => b.push("conv1", conv_bn(&mut rng, 3, widths[0], 3, 1, 1, true), &["input"]),
    };
    let mut in_ch = widths[0];

    for (si, (&width, &nblocks)) in widths.iter().zip(blocks.iter()).enumerate() {
        for bi in 0..nblocks {
            let stride = if si > 0 && bi == 0 { 2 } else { 1 };
            let base = format!("layer{}.{bi}", si + 1);
            let c1 = b.push(
                &format!("{base}.conv1"),
                conv_bn(&mut rng, in_ch, width, 3, stride, 1, true),
                &[&prev],
            );
            let c2 = b.push(
                &format!("{base}.conv2"),
                conv_bn(&mut rng, width, width, 3, 1, 1, false),
                &[&c1],
            );
            let shortcut = if stride != 1 || in_ch != width {
                b.push(
                    &format!("{base}.downsample"),
                    conv_bn(&mut rng, in_ch, width, 1, stride, 0, false),
                    &[&prev],
                )
            } else {
                prev.clone()
            };
            prev = b.push(&format!("{base}.add"), Op::Add { relu: true }, &[&c2, &shortcut]);
            in_ch = width;
        }
    }

    b.push("avgpool", Op::GlobalAvgPool, &[&prev]);
    b.push("fc", linear(&mut rng, widths[3], 1, classes, false), &["avgpool"]);
    b.finish(name, (3, input_hw, input_hw), classes)
}

/// Residual network with bottleneck (1x1 - 3x3 - 1x1) blocks and expansion 4.
pub fn resnet_bottleneck(
    name: &str,
    widths: [usize; 4],
    blocks: [usize; 4],
    input_hw: usize,
    classes: usize,
    seed: u64,
) -> Result<ModelGraph> {
    const EXPANSION: usize = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder::new();

    b.push("conv1", conv_bn(&mut rng, 3, widths[0], 7, 2, 3, true), &["input"]);
    let mut prev = b.push("maxpool", Op::MaxPool { k: 3, stride: 2, padding: 1 }, &["conv1"]);
    let mut in_ch = widths[0];

    for (si, (&width, &nblocks)) in widths.iter().zip(blocks.iter()).enumerate() {
        let out_ch = width * EXPANSION;
        for bi in 0..nblocks {
            let stride = if si > 0 && bi == 0 { 2 } else { 1 };
            let base = format!("layer{}.{bi}", si + 1);
            let c1 = b.push(
                &format!("{base}.conv1"),
                conv_bn(&mut rng, in_ch, width, 1, 1, 0, true),
                &[&prev],
            );
            let c2 = b.push(
                &format!("{base}.conv2"),
                conv_bn(&mut rng, width, width, 3, stride, 1, true),
                &[&c1],
            );
            let c3 = b.push(
                &format!("{base}.conv3"),
                conv_bn(&mut rng, width, out_ch, 1, 1, 0, false),
                &[&c2],
            );
            let shortcut = if stride != 1 || in_ch != out_ch {
                b.push(
                    &format!("{base}.downsample"),
                    conv_bn(&mut rng, in_ch, out_ch, 1, stride, 0, false),
                    &[&prev],
                )
            } else {
                prev.clone()
            };
            prev = b.push(&format!("{base}.add"), Op::Add { relu: true }, &[&c3, &shortcut]);
            in_ch = out_ch;
        }
    }

    b.push("avgpool", Op::GlobalAvgPool, &[&prev]);
    b.push("fc", linear(&mut rng, widths[3] * EXPANSION, 1, classes, false), &["avgpool"]);
    b.finish(name, (3, input_hw, input_hw), classes)
}

/// VGG-16: thirteen 3x3 convs with max pools, then the classic three-layer
/// classifier. Only the convs are prunable; a 224px input leaves a 7x7
/// spatial block per channel at the flatten boundary.
pub fn vgg16(classes: usize, seed: u64) -> Result<ModelGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder::new();
    let cfg: &[&[usize]] = &[&[64, 64], &[128, 128], &[256, 256, 256], &[512, 512, 512], &[512, 512, 512]];

    let mut prev = "input".to_string();
    let mut in_ch = 3;
    for (gi, group) in cfg.iter().enumerate() {
        for (ci, &co) in group.iter().enumerate() {
            let id = format!("conv{}_{}", gi + 1, ci + 1);
            prev = b.push(&id, conv_bias(&mut rng, in_ch, co, 3, 1, 1, true), &[&prev]);
            in_ch = co;
        }
        prev = b.push(
            &format!("pool{}", gi + 1),
            Op::MaxPool { k: 2, stride: 2, padding: 0 },
            &[&prev],
        );
    }

    b.push("flatten", Op::Flatten, &[&prev]);
    b.push("fc1", linear(&mut rng, 512, 49, 4096, true), &["flatten"]);
    b.push("fc2", linear(&mut rng, 4096, 1, 4096, true), &["fc1"]);
    b.push("fc3", linear(&mut rng, 4096, 1, classes, false), &["fc2"]);
    b.finish("vgg16", (3, 224, 224), classes)
}

/// Small two-conv network for unit tests.
pub fn toy_cnn(classes: usize, seed: u64) -> Result<ModelGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder::new();
    b.push("conv1", conv_bn(&mut rng, 3, 8, 3, 1, 1, true), &["input"]);
    b.push("pool1", Op::MaxPool { k: 2, stride: 2, padding: 0 }, &["conv1"]);
    b.push("conv2", conv_bn(&mut rng, 8, 16, 3, 1, 1, true), &["pool1"]);
    b.push("avgpool", Op::GlobalAvgPool, &["conv2"]);
    b.push("fc", linear(&mut rng, 16, 1, classes, false), &["avgpool"]);
    b.finish("toy", (3, 16, 16), classes)
}

/// Build a packaged architecture by name.
///
/// Known names: `resnet18`, `resnet34`, `resnet50`, `vgg16` (224px heads),
/// `resnet18-cifar` (32px stem), `resnet18-tiny` (32px stem at reduced
/// width, the profile the test suite trains on), and `toy`.
pub fn build_graph(arch: &str, classes: usize, seed: u64) -> Result<ModelGraph> {
    match arch {
        "resnet18" => resnet_basic(
            "resnet18",
            [64, 128, 256, 512],
            [2, 2, 2, 2],
            Stem::ImageNet,
            224,
            classes,
            seed,
        ),
        "resnet34" => resnet_basic(
            "resnet34",
            [64, 128, 256, 512],
            [3, 4, 6, 3],
            Stem::ImageNet,
            224,
            classes,
            seed,
        ),
        "resnet50" => {
            resnet_bottleneck("resnet50", [64, 128, 256, 512], [3, 4, 6, 3], 224, classes, seed)
        }
        "vgg16" => vgg16(classes, seed),
        "resnet18-cifar" => resnet_basic(
            "resnet18-cifar",
            [64, 128, 256, 512],
            [2, 2, 2, 2],
            Stem::Cifar,
            32,
            classes,
            seed,
        ),
        "resnet18-tiny" => resnet_basic(
            "resnet18-tiny",
            [4, 8, 16, 32],
            [2, 2, 2, 2],
            Stem::Cifar,
            32,
            classes,
            seed,
        ),
        "toy" => toy_cnn(classes, seed),
        other => Err(Error::Config(format!("unknown architecture `{other}`"))),
    }
}

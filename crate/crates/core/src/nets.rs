//! U-Net and U-Net++ (nested skip) segmentation networks.
//!
//! Both families share one node grid `X[i][j]`: `i` is the resolution level
//! (0 = full resolution) and `j` the column. Column 0 is the encoder. A
//! decoder node `X[i][j]` upsamples `X[i+1][j-1]` with a 2×2 transposed
//! convolution that halves the channels, concatenates it after its skip
//! inputs, and runs a double 3×3 convolution block.
//!
//! * U-Net keeps only the nodes with `i + j = depth - 1`; the skip is `X[i][0]`.
//! * U-Net++ keeps every node with `i + j < depth`; the skips are
//!   `X[i][0..j]` (dense nested pathway).
//!
//! The logits come from a 1×1 convolution on the last node of row 0.
//! Convolutions carry biases; there is no normalization layer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maskcore::LabelMask;
use crate::tensor::{
    conv2d, conv2d_backward, conv_transpose2x2, conv_transpose2x2_backward, max_pool2x2,
    max_pool2x2_backward, relu_backward_inplace, relu_inplace, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Unet,
    Unetpp,
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unet" => Ok(Family::Unet),
            "unetpp" | "unet++" => Ok(Family::Unetpp),
            other => Err(Error::InvalidConfig(format!(
                "architecture must be unet or unetpp, got {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Family::Unet => "unet",
            Family::Unetpp => "unetpp",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub family: Family,
    pub base_width: usize,
    pub depth: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub input_size: usize,
}

impl ModelConfig {
    pub fn new(family: Family, base_width: usize, num_classes: usize, input_size: usize) -> Self {
        Self {
            family,
            base_width,
            depth: 5,
            in_channels: 3,
            num_classes,
            input_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 {
            return Err(Error::InvalidConfig("base_width must be at least 1".into()));
        }
        if self.depth < 2 {
            return Err(Error::InvalidConfig("depth must be at least 2".into()));
        }
        if self.in_channels == 0 {
            return Err(Error::InvalidConfig("in_channels must be at least 1".into()));
        }
        if self.num_classes < 2 || self.num_classes > 256 {
            return Err(Error::InvalidConfig(format!(
                "num_classes must be in 2..=256, got {}",
                self.num_classes
            )));
        }
        let stride = self.downsampling();
        if self.input_size == 0 || self.input_size % stride != 0 {
            return Err(Error::InvalidConfig(format!(
                "input_size {} is not divisible by {stride}",
                self.input_size
            )));
        }
        Ok(())
    }

    /// Total downsampling factor between the input and the bottleneck.
    pub fn downsampling(&self) -> usize {
        1 << (self.depth - 1)
    }

    pub fn width_at(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// `(height, width, channels)` of the deepest encoder activation.
    pub fn bottleneck_shape(&self, height: usize, width: usize) -> (usize, usize, usize) {
        let s = self.downsampling();
        (height / s, width / s, self.width_at(self.depth - 1))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    weight: usize,
    bias: usize,
    cout: usize,
    k: usize,
}

#[derive(Debug, Clone, Copy)]
struct UpConv {
    weight: usize,
    bias: usize,
    cout: usize,
}

#[derive(Debug, Clone, Copy)]
struct Block {
    first: Conv,
    second: Conv,
}

#[derive(Debug, Clone)]
struct DecoderNode {
    level: usize,
    col: usize,
    /// Columns of row `level` concatenated before the upsampled input.
    skips: Vec<usize>,
    up: UpConv,
    block: Block,
}

#[derive(Debug, Clone)]
struct Graph {
    encoder: Vec<Block>,
    decoder: Vec<DecoderNode>,
    head: Conv,
}

/// A built network: configuration, seed and parameters in a fixed order.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    seed: u64,
    specs: Vec<ParamSpec>,
    params: Vec<Vec<f64>>,
    graph: Graph,
}

struct Builder<'a> {
    specs: Vec<ParamSpec>,
    params: Vec<Vec<f64>>,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn push(&mut self, name: String, shape: Vec<usize>, bound: f64) -> usize {
        let n: usize = shape.iter().product();
        let data = if bound > 0.0 {
            (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect()
        } else {
            vec![0.0; n]
        };
        self.specs.push(ParamSpec { name, shape });
        self.params.push(data);
        self.params.len() - 1
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, gain: f64) -> Conv {
        let fan_in = (cin * k * k) as f64;
        let weight = self.push(format!("{name}.weight"), vec![cout, cin, k, k], (gain / fan_in).sqrt());
        let bias = self.push(format!("{name}.bias"), vec![cout], 0.0);
        Conv { weight, bias, cout, k }
    }

    fn block(&mut self, name: &str, cin: usize, cout: usize) -> Block {
        Block {
            first: self.conv(&format!("{name}.conv1"), cin, cout, 3, 6.0),
            second: self.conv(&format!("{name}.conv2"), cout, cout, 3, 6.0),
        }
    }

    fn up(&mut self, name: &str, cin: usize, cout: usize) -> UpConv {
        let weight = self.push(format!("{name}.weight"), vec![cin, cout, 2, 2], (6.0 / cin as f64).sqrt());
        let bias = self.push(format!("{name}.bias"), vec![cout], 0.0);
        UpConv { weight, bias, cout }
    }
}

/// Decoder node coordinates in evaluation order.
fn decoder_layout(family: Family, depth: usize) -> Vec<(usize, usize)> {
    let mut nodes = Vec::new();
    for col in 1..depth {
        match family {
            Family::Unet => nodes.push((depth - 1 - col, col)),
            Family::Unetpp => nodes.extend((0..depth - col).map(|level| (level, col))),
        }
    }
    nodes
}

/// Saved activations of one training forward pass.
pub struct Tape {
    input: Tensor,
    /// Hidden activation of each encoder block.
    encoder: Vec<Tensor>,
    /// Decoder block internals: (concatenated input, hidden), by node.
    decoder: Vec<(Tensor, Tensor)>,
    /// Output activation of every node, indexed `[level][col]`.
    nodes: Vec<Vec<Option<Tensor>>>,
    pooled: Vec<Tensor>,
}

impl Tape {
    pub fn bottleneck_shape(&self) -> [usize; 4] {
        let deepest = self.nodes.len() - 1;
        self.nodes[deepest][0].as_ref().expect("bottleneck").shape()
    }
}

impl Model {
    pub fn build(config: ModelConfig, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let mut b = Builder {
            specs: Vec::new(),
            params: Vec::new(),
            rng: &mut rng,
        };
        let depth = config.depth;
        let mut encoder = Vec::with_capacity(depth);
        for level in 0..depth {
            let cin = if level == 0 {
                config.in_channels
            } else {
                config.width_at(level - 1)
            };
            encoder.push(b.block(&format!("enc{level}"), cin, config.width_at(level)));
        }
        let mut decoder = Vec::new();
        for (level, col) in decoder_layout(config.family, depth) {
            let f = config.width_at(level);
            let skips: Vec<usize> = match config.family {
                Family::Unet => vec![0],
                Family::Unetpp => (0..col).collect(),
            };
            let name = format!("dec{level}_{col}");
            let up = b.up(&format!("{name}.up"), config.width_at(level + 1), f);
            let block = b.block(&name, f * (skips.len() + 1), f);
            decoder.push(DecoderNode {
                level,
                col,
                skips,
                up,
                block,
            });
        }
        let head = b.conv("head", config.base_width, config.num_classes, 1, 1.0);
        let Builder { specs, params, .. } = b;
        Ok(Self {
            config,
            seed: init_seed,
            specs,
            params,
            graph: Graph {
                encoder,
                decoder,
                head,
            },
        })
    }

    /// Rebuilds a model around existing parameters (checkpoint loading).
    pub fn from_parts(config: ModelConfig, seed: u64, params: Vec<Vec<f64>>) -> Result<Self> {
        let mut model = Self::build(config, seed)?;
        if params.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, got {}",
                model.params.len(),
                params.len()
            )));
        }
        for (spec, p) in model.specs.iter().zip(&params) {
            if spec.len() != p.len() {
                return Err(Error::Checkpoint(format!(
                    "{} expects {} values, got {}",
                    spec.name,
                    spec.len(),
                    p.len()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn params(&self) -> &[Vec<f64>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: Vec<Vec<f64>>) {
        assert_eq!(params.len(), self.params.len());
        self.params = params;
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }

    pub fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.params.iter().map(|p| vec![0.0; p.len()]).collect()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let [_, c, h, w] = x.shape();
        let s = self.config.downsampling();
        if c != self.config.in_channels || h == 0 || w == 0 || h % s != 0 || w % s != 0 {
            return Err(Error::ShapeMismatch(format!(
                "input {:?} needs {} channels and sides divisible by {s}",
                x.shape(),
                self.config.in_channels
            )));
        }
        Ok(())
    }

    fn conv(&self, x: &Tensor, c: &Conv) -> Tensor {
        conv2d(x, &self.params[c.weight], &self.params[c.bias], c.cout, c.k)
    }

    fn block_forward(&self, x: &Tensor, b: &Block) -> (Tensor, Tensor) {
        let mut hidden = self.conv(x, &b.first);
        relu_inplace(&mut hidden);
        let mut out = self.conv(&hidden, &b.second);
        relu_inplace(&mut out);
        (hidden, out)
    }

    fn block_backward(
        &self,
        b: &Block,
        input: &Tensor,
        hidden: &Tensor,
        out: &Tensor,
        mut dout: Tensor,
        grads: &mut [Vec<f64>],
    ) -> Tensor {
        relu_backward_inplace(out, &mut dout);
        let mut dhidden = self.conv_backward(&b.second, hidden, &dout, grads);
        relu_backward_inplace(hidden, &mut dhidden);
        self.conv_backward(&b.first, input, &dhidden, grads)
    }

    fn conv_backward(&self, c: &Conv, x: &Tensor, dy: &Tensor, grads: &mut [Vec<f64>]) -> Tensor {
        let (gw, gb) = two_mut(grads, c.weight, c.bias);
        conv2d_backward(x, &self.params[c.weight], dy, c.k, gw, gb)
    }

    /// Forward pass keeping every activation needed by [`Model::backward`].
    pub fn forward_train(&self, x: &Tensor) -> Result<(Tensor, Tape)> {
        self.check_input(x)?;
        let depth = self.config.depth;
        let mut nodes: Vec<Vec<Option<Tensor>>> = (0..depth).map(|i| vec![None; depth - i]).collect();
        let mut encoder = Vec::with_capacity(depth);
        let mut pooled = Vec::with_capacity(depth - 1);
        for (level, block) in self.graph.encoder.iter().enumerate() {
            let input = if level == 0 {
                x.clone()
            } else {
                max_pool2x2(nodes[level - 1][0].as_ref().expect("encoder node"))
            };
            let (hidden, out) = self.block_forward(&input, block);
            if level > 0 {
                pooled.push(input);
            }
            encoder.push(hidden);
            nodes[level][0] = Some(out);
        }

        let mut decoder = Vec::with_capacity(self.graph.decoder.len());
        for node in &self.graph.decoder {
            let below = nodes[node.level + 1][node.col - 1].as_ref().expect("decoder input");
            let up = conv_transpose2x2(
                below,
                &self.params[node.up.weight],
                &self.params[node.up.bias],
                node.up.cout,
            );
            let mut parts: Vec<&Tensor> = node
                .skips
                .iter()
                .map(|&c| nodes[node.level][c].as_ref().expect("skip"))
                .collect();
            parts.push(&up);
            let input = Tensor::concat_channels(&parts);
            let (hidden, out) = self.block_forward(&input, &node.block);
            decoder.push((input, hidden));
            nodes[node.level][node.col] = Some(out);
        }

        let last = nodes[0][depth - 1].as_ref().expect("last node");
        let logits = self.conv(last, &self.graph.head);
        let tape = Tape {
            input: x.clone(),
            encoder,
            decoder,
            nodes,
            pooled,
        };
        Ok((logits, tape))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_train(x)?.0)
    }

    /// Backpropagates `dlogits` and returns parameter gradients in
    /// [`Model::params`] order.
    pub fn backward(&self, tape: &Tape, dlogits: &Tensor) -> Vec<Vec<f64>> {
        let mut grads = self.zero_grads();
        let depth = self.config.depth;
        let mut dnodes: Vec<Vec<Option<Tensor>>> = (0..depth).map(|i| vec![None; depth - i]).collect();
        let add = |slot: &mut Option<Tensor>, g: Tensor| match slot {
            Some(acc) => acc.add_assign(&g),
            None => *slot = Some(g),
        };

        let last = tape.nodes[0][depth - 1].as_ref().expect("last node");
        let dlast = self.conv_backward(&self.graph.head, last, dlogits, &mut grads);
        add(&mut dnodes[0][depth - 1], dlast);

        for (node, (input, hidden)) in self.graph.decoder.iter().zip(&tape.decoder).rev() {
            let out = tape.nodes[node.level][node.col].as_ref().expect("node");
            let Some(dout) = dnodes[node.level][node.col].take() else {
                continue;
            };
            let dinput = self.block_backward(&node.block, input, hidden, out, dout, &mut grads);
            let f = node.up.cout;
            let mut sizes = vec![f; node.skips.len()];
            sizes.push(f);
            let mut parts = dinput.split_channels(&sizes);
            let dup = parts.pop().expect("upsampled part");
            for (&c, g) in node.skips.iter().zip(parts) {
                add(&mut dnodes[node.level][c], g);
            }
            let below = tape.nodes[node.level + 1][node.col - 1].as_ref().expect("below");
            let (gw, gb) = two_mut(&mut grads, node.up.weight, node.up.bias);
            let dbelow = conv_transpose2x2_backward(below, &self.params[node.up.weight], &dup, gw, gb);
            add(&mut dnodes[node.level + 1][node.col - 1], dbelow);
        }

        for level in (0..depth).rev() {
            let Some(dout) = dnodes[level][0].take() else {
                continue;
            };
            let block = &self.graph.encoder[level];
            let out = tape.nodes[level][0].as_ref().expect("encoder node");
            let input = if level == 0 { &tape.input } else { &tape.pooled[level - 1] };
            let hidden = &tape.encoder[level];
            let dinput = self.block_backward(block, input, hidden, out, dout, &mut grads);
            if level > 0 {
                let above = tape.nodes[level - 1][0].as_ref().expect("encoder node");
                add(&mut dnodes[level - 1][0], max_pool2x2_backward(above, &dinput));
            }
        }
        grads
    }

    /// Per-pixel argmax of the logits as label masks.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<LabelMask>> {
        let logits = self.forward(x)?;
        argmax_masks(&logits)
    }
}

/// Converts `(B, C, H, W)` logits to one argmax mask per sample; ties go to
/// the lowest class index.
pub fn argmax_masks(logits: &Tensor) -> Result<Vec<LabelMask>> {
    let [n, c, h, w] = logits.shape();
    let hw = h * w;
    (0..n)
        .map(|b| {
            let s = logits.sample(b);
            let labels = (0..hw)
                .map(|p| {
                    let mut best = 0;
                    for k in 1..c {
                        if s[k * hw + p] > s[best * hw + p] {
                            best = k;
                        }
                    }
                    best as u8
                })
                .collect();
            LabelMask::new(w, h, c, labels)
        })
        .collect()
}

fn two_mut(v: &mut [Vec<f64>], a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
    assert!(a < b);
    let (lo, hi) = v.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Closed-form parameter tally, layer by layer, independent of the builder.
    fn tally(family: Family, w: usize, c: usize) -> usize {
        let conv = |i: usize, o: usize, k: usize| i * o * k * k + o;
        let block = |i: usize, o: usize| conv(i, o, 3) + conv(o, o, 3);
        let f: Vec<usize> = (0..5).map(|i| w << i).collect();
        let mut p = block(3, f[0]);
        for i in 1..5 {
            p += block(f[i - 1], f[i]);
        }
        for j in 1..5 {
            let levels: Vec<usize> = match family {
                Family::Unet => vec![4 - j],
                Family::Unetpp => (0..5 - j).collect(),
            };
            for i in levels {
                let inputs = match family {
                    Family::Unet => 2,
                    Family::Unetpp => j + 1,
                };
                p += conv(f[i + 1], f[i], 2) + block(inputs * f[i], f[i]);
            }
        }
        p + conv(f[0], c, 1)
    }

    #[test]
    fn single_head_conv_count() {
        // 1×1 conv 64→2 with bias.
        let conv = |i: usize, o: usize, k: usize| i * o * k * k + o;
        assert_eq!(conv(64, 2, 1), 130);
    }

    #[test]
    fn param_counts_match_tally() {
        for family in [Family::Unet, Family::Unetpp] {
            for w in [1, 2, 8] {
                for c in [2, 3] {
                    let m = Model::build(ModelConfig::new(family, w, c, 32), 0).unwrap();
                    assert_eq!(m.param_count(), tally(family, w, c), "{family} w={w} c={c}");
                }
            }
        }
    }

    #[test]
    fn nested_has_more_params_and_width_is_monotone() {
        for w in [2, 4, 8] {
            let u = tally(Family::Unet, w, 2);
            let pp = tally(Family::Unetpp, w, 2);
            assert!(pp > u);
            assert!(tally(Family::Unet, w / 2, 2) < u);
        }
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(Model::build(ModelConfig::new(Family::Unet, 8, 2, 40), 0).is_err());
        let m = Model::build(ModelConfig::new(Family::Unet, 2, 2, 32), 0).unwrap();
        assert!(matches!(m.forward(&Tensor::zeros([1, 3, 24, 32])), Err(Error::ShapeMismatch(_))));
        assert!(matches!(m.forward(&Tensor::zeros([1, 1, 32, 32])), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn shapes_through_the_network() {
        for family in [Family::Unet, Family::Unetpp] {
            let cfg = ModelConfig::new(family, 8, 3, 32);
            let m = Model::build(cfg, 1).unwrap();
            let (out, tape) = m.forward_train(&Tensor::zeros([2, 3, 32, 32])).unwrap();
            assert_eq!(out.shape(), [2, 3, 32, 32]);
            assert_eq!(tape.bottleneck_shape(), [2, 128, 2, 2]);
            assert_eq!(cfg.bottleneck_shape(32, 32), (2, 2, 128));
        }
    }

    #[test]
    fn seeded_build_is_reproducible() {
        let cfg = ModelConfig::new(Family::Unetpp, 2, 2, 16);
        let a = Model::build(cfg, 5).unwrap();
        let b = Model::build(cfg, 5).unwrap();
        let c = Model::build(cfg, 6).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        let logits = Tensor::from_vec([1, 2, 1, 2], vec![0.0, 1.0, 0.0, 2.0]).unwrap();
        let masks = argmax_masks(&logits).unwrap();
        assert_eq!(masks[0].labels(), &[0, 1]);
    }
}

use rand::Rng;

use crate::nn::{
    concat_channels, relu, relu_backward, sigmoid, sigmoid_backward, split_channels, AvgPool2,
    BatchNorm2d, Conv2d, ConvTranspose2x2, MaxPool2d, Module, Param, Tensor,
};

/// Width of the DenseNet-121 stem convolution.
pub const STEM_CHANNELS: usize = 64;
/// Bottleneck width of a composite layer, as a multiple of the growth rate.
pub const BOTTLENECK_FACTOR: usize = 4;

/// BN + ReLU + 1x1 conv + BN + ReLU + 3x3 conv, emitting `growth` channels.
#[derive(Clone, Debug)]
pub(crate) struct CompositeLayer {
    bn1: BatchNorm2d,
    conv1: Conv2d,
    bn2: BatchNorm2d,
    conv2: Conv2d,
    acts: Option<(Tensor, Tensor)>,
}

impl CompositeLayer {
    fn new(name: &str, in_ch: usize, growth: usize, rng: &mut impl Rng) -> Self {
        let mid = BOTTLENECK_FACTOR * growth;
        Self {
            bn1: BatchNorm2d::new(&format!("{name}.norm1"), in_ch, rng),
            conv1: Conv2d::pointwise(&format!("{name}.conv1"), in_ch, mid, false, rng),
            bn2: BatchNorm2d::new(&format!("{name}.norm2"), mid, rng),
            conv2: Conv2d::same3(&format!("{name}.conv2"), mid, growth, false, rng),
            acts: None,
        }
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        let mut a = self.bn1.infer(x);
        relu(&mut a);
        let mut b = self.bn2.infer(&self.conv1.infer(&a));
        relu(&mut b);
        self.conv2.infer(&b)
    }

    fn forward(&mut self, x: &Tensor) -> Tensor {
        let mut a = self.bn1.forward(x);
        relu(&mut a);
        let mut b = self.conv1.forward(&a);
        b = self.bn2.forward(&b);
        relu(&mut b);
        let y = self.conv2.forward(&b);
        self.acts = Some((a, b));
        y
    }

    fn backward(&mut self, dy: &Tensor) -> Tensor {
        let (a, b) = self.acts.take().expect("composite backward without forward");
        let mut d = self.conv2.backward(dy);
        relu_backward(&b, &mut d);
        let d = self.bn2.backward(&d);
        let mut d = self.conv1.backward(&d);
        relu_backward(&a, &mut d);
        self.bn1.backward(&d)
    }
}

impl Module for CompositeLayer {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.bn1.visit(f);
        self.conv1.visit(f);
        self.bn2.visit(f);
        self.conv2.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.bn1.visit_mut(f);
        self.conv1.visit_mut(f);
        self.bn2.visit_mut(f);
        self.conv2.visit_mut(f);
    }
}

/// Each layer sees the block input concatenated with every earlier layer's
/// output; the block emits that full concatenation.
#[derive(Clone, Debug)]
pub(crate) struct DenseBlock {
    layers: Vec<CompositeLayer>,
    in_ch: usize,
    growth: usize,
}

impl DenseBlock {
    fn new(name: &str, in_ch: usize, n_layers: usize, growth: usize, rng: &mut impl Rng) -> Self {
        let layers = (0..n_layers)
            .map(|i| CompositeLayer::new(&format!("{name}.layer{i}"), in_ch + i * growth, growth, rng))
            .collect();
        Self {
            layers,
            in_ch,
            growth,
        }
    }

    fn out_ch(&self) -> usize {
        self.in_ch + self.layers.len() * self.growth
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        let mut cat = x.clone();
        for layer in &self.layers {
            let f = layer.infer(&cat);
            cat = concat_channels(&cat, &f);
        }
        cat
    }

    fn forward(&mut self, x: &Tensor) -> Tensor {
        let mut cat = x.clone();
        for layer in &mut self.layers {
            let f = layer.forward(&cat);
            cat = concat_channels(&cat, &f);
        }
        cat
    }

    fn backward(&mut self, dy: &Tensor) -> Tensor {
        let mut d = dy.clone();
        for layer in self.layers.iter_mut().rev() {
            let (mut dprev, df) = split_channels(&d, d.c - self.growth);
            dprev.add_assign(&layer.backward(&df));
            d = dprev;
        }
        d
    }
}

impl Module for DenseBlock {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.layers.iter().for_each(|l| l.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.layers.iter_mut().for_each(|l| l.visit_mut(f));
    }
}

/// BN + ReLU + 1x1 conv (halving channels) + 2x2 average pool.
#[derive(Clone, Debug)]
pub(crate) struct Transition {
    bn: BatchNorm2d,
    conv: Conv2d,
    pool: AvgPool2,
    act: Option<Tensor>,
}

impl Transition {
    fn new(name: &str, in_ch: usize, out_ch: usize, rng: &mut impl Rng) -> Self {
        Self {
            bn: BatchNorm2d::new(&format!("{name}.norm"), in_ch, rng),
            conv: Conv2d::pointwise(&format!("{name}.conv"), in_ch, out_ch, false, rng),
            pool: AvgPool2::new(),
            act: None,
        }
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        let mut a = self.bn.infer(x);
        relu(&mut a);
        self.pool.infer(&self.conv.infer(&a))
    }

    fn forward(&mut self, x: &Tensor) -> Tensor {
        let mut a = self.bn.forward(x);
        relu(&mut a);
        let y = self.pool.forward(&self.conv.forward(&a));
        self.act = Some(a);
        y
    }

    fn backward(&mut self, dy: &Tensor) -> Tensor {
        let a = self.act.take().expect("transition backward without forward");
        let d = self.pool.backward(dy);
        let mut d = self.conv.backward(&d);
        relu_backward(&a, &mut d);
        self.bn.backward(&d)
    }
}

impl Module for Transition {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.bn.visit(f);
        self.conv.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.bn.visit_mut(f);
        self.conv.visit_mut(f);
    }
}

/// 2x2 transposed conv followed by a one-layer dense block.
#[derive(Clone, Debug)]
pub(crate) struct UpStage {
    up: ConvTranspose2x2,
    block: DenseBlock,
    skip_ch: usize,
}

/// DenseNet-121 encoder (1-channel stem) with a five-stage dense decoder.
///
/// The stem (7x7/2 conv + 3x3/2 max pool) and three transitions downsample
/// 32x overall, so the decoder needs one stage per encoder block plus one.
/// Stage `j` upsamples, concatenates the encoder feature map at the new
/// resolution (dense block outputs, then the stem activation) and applies a
/// single composite layer. The last stage runs at input resolution, where no
/// encoder feature exists, so it has no skip.
#[derive(Clone, Debug)]
pub struct DenseUNet {
    stem_conv: Conv2d,
    stem_bn: BatchNorm2d,
    stem_pool: MaxPool2d,
    blocks: Vec<DenseBlock>,
    transitions: Vec<Transition>,
    final_bn: BatchNorm2d,
    stages: Vec<UpStage>,
    head: Conv2d,
    acts: Option<DenseActs>,
}

#[derive(Clone, Debug)]
struct DenseActs {
    stem: Tensor,
    bottleneck: Tensor,
    out: Tensor,
}

impl DenseUNet {
    pub fn new(block_sizes: &[usize], growth: usize, up_growth: &[usize], rng: &mut impl Rng) -> Self {
        assert_eq!(up_growth.len(), block_sizes.len() + 1, "one decoder stage per block plus one");
        let stem_conv = Conv2d::new("stem.conv", 1, STEM_CHANNELS, 7, 2, 3, false, rng);
        let stem_bn = BatchNorm2d::new("stem.norm", STEM_CHANNELS, rng);
        let stem_pool = MaxPool2d::new(3, 2, 1);

        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        let mut ch = STEM_CHANNELS;
        for (i, &n) in block_sizes.iter().enumerate() {
            let block = DenseBlock::new(&format!("block{i}"), ch, n, growth, rng);
            ch = block.out_ch();
            blocks.push(block);
            if i + 1 < block_sizes.len() {
                transitions.push(Transition::new(&format!("trans{i}"), ch, ch / 2, rng));
                ch /= 2;
            }
        }
        let final_bn = BatchNorm2d::new("final.norm", ch, rng);

        // Skip widths from deepest decoder target upward: block outputs except
        // the last, then the stem.
        let mut skip_widths: Vec<usize> = blocks[..blocks.len() - 1]
            .iter()
            .rev()
            .map(DenseBlock::out_ch)
            .collect();
        skip_widths.push(STEM_CHANNELS);
        skip_widths.push(0);

        let mut stages = Vec::with_capacity(up_growth.len());
        for (j, (&g, &skip_ch)) in up_growth.iter().zip(&skip_widths).enumerate() {
            let up_ch = if skip_ch > 0 { skip_ch } else { STEM_CHANNELS / 2 };
            let up = ConvTranspose2x2::new(&format!("dec{j}.up"), ch, up_ch, rng);
            let block = DenseBlock::new(&format!("dec{j}.block"), up_ch + skip_ch, 1, g, rng);
            ch = block.out_ch();
            stages.push(UpStage { up, block, skip_ch });
        }
        let head = Conv2d::pointwise("head", ch, 1, true, rng);
        Self {
            stem_conv,
            stem_bn,
            stem_pool,
            blocks,
            transitions,
            final_bn,
            stages,
            head,
            acts: None,
        }
    }

    /// Composite-layer count of each encoder dense block.
    pub fn block_layer_counts(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.layers.len()).collect()
    }

    pub fn block_out_channels(&self) -> Vec<usize> {
        self.blocks.iter().map(DenseBlock::out_ch).collect()
    }

    pub fn encoder_growth(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.growth)
    }

    pub fn decoder_growths(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.block.growth).collect()
    }

    /// (transposed-conv width, skip width) per decoder stage.
    pub fn decoder_widths(&self) -> Vec<(usize, usize)> {
        self.stages.iter().map(|s| (s.up.out_ch, s.skip_ch)).collect()
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        let mut stem = self.stem_bn.infer(&self.stem_conv.infer(x));
        relu(&mut stem);
        let mut h = self.stem_pool.infer(&stem);
        let mut skips = vec![stem];
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.infer(&h);
            if let Some(t) = self.transitions.get(i) {
                let down = t.infer(&h);
                skips.push(h);
                h = down;
            }
        }
        h = self.final_bn.infer(&h);
        relu(&mut h);
        for stage in &self.stages {
            let u = stage.up.infer(&h);
            let cat = if stage.skip_ch > 0 {
                concat_channels(&u, &skips.pop().expect("skip per stage"))
            } else {
                u
            };
            h = stage.block.infer(&cat);
        }
        let mut y = self.head.infer(&h);
        sigmoid(&mut y);
        y
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let mut stem = self.stem_conv.forward(x);
        stem = self.stem_bn.forward(&stem);
        relu(&mut stem);
        let mut h = self.stem_pool.forward(&stem);
        let mut skips = vec![stem.clone()];
        for (i, block) in self.blocks.iter_mut().enumerate() {
            h = block.forward(&h);
            if let Some(t) = self.transitions.get_mut(i) {
                let down = t.forward(&h);
                skips.push(h);
                h = down;
            }
        }
        h = self.final_bn.forward(&h);
        relu(&mut h);
        let bottleneck = h.clone();
        for stage in &mut self.stages {
            let u = stage.up.forward(&h);
            let cat = if stage.skip_ch > 0 {
                concat_channels(&u, &skips.pop().expect("skip per stage"))
            } else {
                u
            };
            h = stage.block.forward(&cat);
        }
        let mut y = self.head.forward(&h);
        sigmoid(&mut y);
        self.acts = Some(DenseActs {
            stem,
            bottleneck,
            out: y.clone(),
        });
        y
    }

    pub fn backward(&mut self, dprob: &Tensor) -> Tensor {
        let acts = self.acts.take().expect("dense unet backward without forward");
        let mut d = dprob.clone();
        sigmoid_backward(&acts.out, &mut d);
        let mut d = self.head.backward(&d);

        // Skip gradients in encoder order: stem first, then block outputs.
        let mut skip_grads: Vec<Tensor> = Vec::new();
        for stage in self.stages.iter_mut().rev() {
            let dcat = stage.block.backward(&d);
            let du = if stage.skip_ch > 0 {
                let (du, dskip) = split_channels(&dcat, stage.up.out_ch);
                skip_grads.push(dskip);
                du
            } else {
                dcat
            };
            d = stage.up.backward(&du);
        }
        relu_backward(&acts.bottleneck, &mut d);
        d = self.final_bn.backward(&d);

        let mut skip_grads = skip_grads.into_iter();
        let stem_grad = skip_grads.next().expect("stem skip gradient");
        let mut block_grads: Vec<Tensor> = skip_grads.collect();
        for (i, block) in self.blocks.iter_mut().enumerate().rev() {
            if let Some(t) = self.transitions.get_mut(i) {
                d = t.backward(&d);
                d.add_assign(&block_grads.pop().expect("block skip gradient"));
            }
            d = block.backward(&d);
        }
        d = self.stem_pool.backward(&d);
        d.add_assign(&stem_grad);
        relu_backward(&acts.stem, &mut d);
        d = self.stem_bn.backward(&d);
        self.stem_conv.backward(&d)
    }
}

impl Module for DenseUNet {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.stem_conv.visit(f);
        self.stem_bn.visit(f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(f);
            if let Some(t) = self.transitions.get(i) {
                t.visit(f);
            }
        }
        self.final_bn.visit(f);
        for s in &self.stages {
            s.up.visit(f);
            s.block.visit(f);
        }
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.stem_conv.visit_mut(f);
        self.stem_bn.visit_mut(f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(f);
            if let Some(t) = self.transitions.get_mut(i) {
                t.visit_mut(f);
            }
        }
        self.final_bn.visit_mut(f);
        for s in &mut self.stages {
            s.up.visit_mut(f);
            s.block.visit_mut(f);
        }
        self.head.visit_mut(f);
    }
}

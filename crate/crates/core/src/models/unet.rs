use rand::Rng;

use crate::nn::{
    concat_channels, relu, relu_backward, sigmoid, sigmoid_backward, split_channels, Conv2d,
    ConvTranspose2x2, MaxPool2d, Module, Param, Tensor,
};

/// 3x3 conv + ReLU + 3x3 conv + ReLU.
#[derive(Clone, Debug)]
pub(crate) struct DoubleConv {
    pub a: Conv2d,
    pub b: Conv2d,
    acts: Option<(Tensor, Tensor)>,
}

impl DoubleConv {
    fn new(name: &str, in_ch: usize, out_ch: usize, rng: &mut impl Rng) -> Self {
        Self {
            a: Conv2d::same3(&format!("{name}.conv1"), in_ch, out_ch, true, rng),
            b: Conv2d::same3(&format!("{name}.conv2"), out_ch, out_ch, true, rng),
            acts: None,
        }
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        let mut h = self.a.infer(x);
        relu(&mut h);
        let mut y = self.b.infer(&h);
        relu(&mut y);
        y
    }

    fn forward(&mut self, x: &Tensor) -> Tensor {
        let mut h = self.a.forward(x);
        relu(&mut h);
        let mut y = self.b.forward(&h);
        relu(&mut y);
        self.acts = Some((h, y.clone()));
        y
    }

    fn backward(&mut self, dy: &Tensor) -> Tensor {
        let (h, y) = self.acts.take().expect("double conv backward without forward");
        let mut d = dy.clone();
        relu_backward(&y, &mut d);
        let mut d = self.b.backward(&d);
        relu_backward(&h, &mut d);
        self.a.backward(&d)
    }
}

impl Module for DoubleConv {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.a.visit(f);
        self.b.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.a.visit_mut(f);
        self.b.visit_mut(f);
    }
}

/// Encoder of double-conv blocks with 2x2 max pooling, mirrored decoder of
/// 2x2 up-convolutions and double-conv blocks, skip concatenations at every
/// resolution, and a 1x1 sigmoid head.
#[derive(Clone, Debug)]
pub struct UNet {
    enc: Vec<DoubleConv>,
    pools: Vec<MaxPool2d>,
    ups: Vec<ConvTranspose2x2>,
    dec: Vec<DoubleConv>,
    head: Conv2d,
    out: Option<Tensor>,
}

impl UNet {
    pub fn new(channels: &[usize], rng: &mut impl Rng) -> Self {
        let depth = channels.len();
        let mut enc = Vec::with_capacity(depth);
        let mut in_ch = 1;
        for (l, &c) in channels.iter().enumerate() {
            enc.push(DoubleConv::new(&format!("enc{l}"), in_ch, c, rng));
            in_ch = c;
        }
        let pools = (0..depth - 1).map(|_| MaxPool2d::new(2, 2, 0)).collect();
        let mut ups = Vec::with_capacity(depth - 1);
        let mut dec = Vec::with_capacity(depth - 1);
        for lvl in (0..depth - 1).rev() {
            let c = channels[lvl];
            ups.push(ConvTranspose2x2::new(&format!("up{lvl}"), in_ch, c, rng));
            dec.push(DoubleConv::new(&format!("dec{lvl}"), 2 * c, c, rng));
            in_ch = c;
        }
        let head = Conv2d::pointwise("head", in_ch, 1, true, rng);
        Self {
            enc,
            pools,
            ups,
            dec,
            head,
            out: None,
        }
    }

    /// Output widths of the encoder blocks, shallowest first.
    pub fn encoder_widths(&self) -> Vec<usize> {
        self.enc.iter().map(|b| b.b.out_ch).collect()
    }

    /// Output widths of the decoder blocks, deepest first.
    pub fn decoder_widths(&self) -> Vec<usize> {
        self.dec.iter().map(|b| b.b.out_ch).collect()
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        let mut skips = Vec::with_capacity(self.pools.len());
        let mut h = x.clone();
        for (l, block) in self.enc.iter().enumerate() {
            h = block.infer(&h);
            if let Some(pool) = self.pools.get(l) {
                let pooled = pool.infer(&h);
                skips.push(h);
                h = pooled;
            }
        }
        for (up, block) in self.ups.iter().zip(&self.dec) {
            let u = up.infer(&h);
            let skip = skips.pop().expect("skip per decoder stage");
            h = block.infer(&concat_channels(&skip, &u));
        }
        let mut y = self.head.infer(&h);
        sigmoid(&mut y);
        y
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let mut skips = Vec::with_capacity(self.pools.len());
        let mut h = x.clone();
        for (l, block) in self.enc.iter_mut().enumerate() {
            h = block.forward(&h);
            if let Some(pool) = self.pools.get_mut(l) {
                let pooled = pool.forward(&h);
                skips.push(h);
                h = pooled;
            }
        }
        for (up, block) in self.ups.iter_mut().zip(&mut self.dec) {
            let u = up.forward(&h);
            let skip = skips.pop().expect("skip per decoder stage");
            h = block.forward(&concat_channels(&skip, &u));
        }
        let mut y = self.head.forward(&h);
        sigmoid(&mut y);
        self.out = Some(y.clone());
        y
    }

    /// Backpropagates dL/d(output probability); returns dL/d(input).
    pub fn backward(&mut self, dprob: &Tensor) -> Tensor {
        let y = self.out.take().expect("unet backward without forward");
        let mut d = dprob.clone();
        sigmoid_backward(&y, &mut d);
        let mut d = self.head.backward(&d);
        let n_skip = self.pools.len();
        let mut skip_grads: Vec<Option<Tensor>> = vec![None; n_skip];
        for (j, (up, block)) in self.ups.iter_mut().zip(&mut self.dec).enumerate().rev() {
            let lvl = n_skip - 1 - j;
            let dcat = block.backward(&d);
            let (dskip, du) = split_channels(&dcat, block.b.out_ch);
            skip_grads[lvl] = Some(dskip);
            d = up.backward(&du);
        }
        for (l, block) in self.enc.iter_mut().enumerate().rev() {
            if let Some(pool) = self.pools.get_mut(l) {
                d = pool.backward(&d);
                d.add_assign(skip_grads[l].as_ref().expect("skip gradient"));
            }
            d = block.backward(&d);
        }
        d
    }
}

impl Module for UNet {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.enc.iter().for_each(|b| b.visit(f));
        for (u, b) in self.ups.iter().zip(&self.dec) {
            u.visit(f);
            b.visit(f);
        }
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.enc.iter_mut().for_each(|b| b.visit_mut(f));
        for (u, b) in self.ups.iter_mut().zip(&mut self.dec) {
            u.visit_mut(f);
            b.visit_mut(f);
        }
        self.head.visit_mut(f);
    }
}

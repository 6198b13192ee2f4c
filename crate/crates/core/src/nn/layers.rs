use rand::Rng;

use super::{sgemm, Module, Param, ParamInit, Tensor};

/// Running-statistics momentum (weight of the newest batch).
pub const BN_MOMENTUM: f32 = 0.1;
pub const BN_EPS: f32 = 1e-5;

/// Square-kernel 2-D convolution with zero padding.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Param,
    pub bias: Option<Param>,
    cache: Option<Tensor>,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let weight = Param::new(
            format!("{name}.weight"),
            &[out_ch, in_ch, kernel, kernel],
            ParamInit::HeUniform { fan_in },
            rng,
        );
        let bias = bias.then(|| Param::new(format!("{name}.bias"), &[out_ch], ParamInit::Zeros, rng));
        Self {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            weight,
            bias,
            cache: None,
        }
    }

    /// "Same" 3x3 convolution (stride 1, pad 1).
    pub fn same3(name: &str, in_ch: usize, out_ch: usize, bias: bool, rng: &mut impl Rng) -> Self {
        Self::new(name, in_ch, out_ch, 3, 1, 1, bias, rng)
    }

    pub fn pointwise(name: &str, in_ch: usize, out_ch: usize, bias: bool, rng: &mut impl Rng) -> Self {
        Self::new(name, in_ch, out_ch, 1, 1, 0, bias, rng)
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col(&self, x: &[f32], h: usize, w: usize, oh: usize, ow: usize, col: &mut [f32]) {
        let k = self.kernel;
        let n = oh * ow;
        for c in 0..self.in_ch {
            let src = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut col[((c * k + ky) * k + kx) * n..][..n];
                    for oy in 0..oh {
                        let dst = &mut row[oy * ow..(oy + 1) * ow];
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                        if self.stride == 1 {
                            // Contiguous run with zero borders.
                            let off = kx as isize - self.pad as isize;
                            for (ox, d) in dst.iter_mut().enumerate() {
                                let ix = ox as isize + off;
                                *d = if ix >= 0 && ix < w as isize {
                                    srow[ix as usize]
                                } else {
                                    0.0
                                };
                            }
                        } else {
                            for (ox, d) in dst.iter_mut().enumerate() {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                *d = if ix >= 0 && ix < w as isize {
                                    srow[ix as usize]
                                } else {
                                    0.0
                                };
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f32], h: usize, w: usize, oh: usize, ow: usize, dx: &mut [f32]) {
        let k = self.kernel;
        let n = oh * ow;
        for c in 0..self.in_ch {
            let dst = &mut dx[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &col[((c * k + ky) * k + kx) * n..][..n];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let drow = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, &v) in row[oy * ow..(oy + 1) * ow].iter().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                drow[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.c, self.in_ch, "{}: input channels", self.weight.name);
        let (oh, ow) = self.out_size(x.h, x.w);
        let n = oh * ow;
        let kdim = self.in_ch * self.kernel * self.kernel;
        let mut out = Tensor::zeros(x.n, self.out_ch, oh, ow);
        let mut col = if self.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; kdim * n]
        };
        for i in 0..x.n {
            let xi = x.item(i);
            let b: &[f32] = if self.is_pointwise() {
                xi
            } else {
                self.im2col(xi, x.h, x.w, oh, ow, &mut col);
                &col
            };
            let yi = out.item_mut(i);
            if let Some(bias) = &self.bias {
                for (row, &bv) in yi.chunks_exact_mut(n).zip(&bias.value) {
                    row.fill(bv);
                }
            }
            let beta = if self.bias.is_some() { 1.0 } else { 0.0 };
            sgemm(
                self.out_ch,
                kdim,
                n,
                1.0,
                &self.weight.value,
                kdim,
                1,
                b,
                n,
                1,
                beta,
                yi,
                n,
            );
        }
        out
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let y = self.infer(x);
        self.cache = Some(x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let x = self.cache.take().expect("conv backward without forward");
        let (oh, ow) = (dy.h, dy.w);
        let n = oh * ow;
        let kdim = self.in_ch * self.kernel * self.kernel;
        let mut dx = Tensor::zeros(x.n, x.c, x.h, x.w);
        let pointwise = self.is_pointwise();
        let mut col = if pointwise { Vec::new() } else { vec![0.0; kdim * n] };
        let mut dcol = if pointwise { Vec::new() } else { vec![0.0; kdim * n] };
        for i in 0..x.n {
            let dyi = dy.item(i);
            if let Some(bias) = &mut self.bias {
                for (g, row) in bias.grad.iter_mut().zip(dyi.chunks_exact(n)) {
                    *g += row.iter().sum::<f32>();
                }
            }
            let xi = x.item(i);
            let b: &[f32] = if pointwise {
                xi
            } else {
                self.im2col(xi, x.h, x.w, oh, ow, &mut col);
                &col
            };
            // dW += dY · colᵀ
            sgemm(
                self.out_ch,
                n,
                kdim,
                1.0,
                dyi,
                n,
                1,
                b,
                1,
                n,
                1.0,
                &mut self.weight.grad,
                kdim,
            );
            // dcol = Wᵀ · dY
            if pointwise {
                sgemm(
                    kdim,
                    self.out_ch,
                    n,
                    1.0,
                    &self.weight.value,
                    1,
                    kdim,
                    dyi,
                    n,
                    1,
                    0.0,
                    dx.item_mut(i),
                    n,
                );
            } else {
                sgemm(
                    kdim,
                    self.out_ch,
                    n,
                    1.0,
                    &self.weight.value,
                    1,
                    kdim,
                    dyi,
                    n,
                    1,
                    0.0,
                    &mut dcol,
                    n,
                );
                self.col2im(&dcol, x.h, x.w, oh, ow, dx.item_mut(i));
            }
        }
        dx
    }
}

impl Module for Conv2d {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

/// 2x2 transposed convolution with stride 2 (exact 2x upsampling).
#[derive(Clone, Debug)]
pub struct ConvTranspose2x2 {
    pub in_ch: usize,
    pub out_ch: usize,
    /// Layout `[in_ch, out_ch, 2, 2]`.
    pub weight: Param,
    pub bias: Param,
    cache: Option<Tensor>,
}

impl ConvTranspose2x2 {
    pub fn new(name: &str, in_ch: usize, out_ch: usize, rng: &mut impl Rng) -> Self {
        // Each output pixel receives exactly in_ch contributions.
        let weight = Param::new(
            format!("{name}.weight"),
            &[in_ch, out_ch, 2, 2],
            ParamInit::HeUniform { fan_in: in_ch },
            rng,
        );
        let bias = Param::new(format!("{name}.bias"), &[out_ch], ParamInit::Zeros, rng);
        Self {
            in_ch,
            out_ch,
            weight,
            bias,
            cache: None,
        }
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.c, self.in_ch, "{}: input channels", self.weight.name);
        let p = x.plane();
        let m = self.out_ch * 4;
        let (oh, ow) = (x.h * 2, x.w * 2);
        let mut out = Tensor::zeros(x.n, self.out_ch, oh, ow);
        let mut ycol = vec![0.0f32; m * p];
        for i in 0..x.n {
            sgemm(
                m,
                self.in_ch,
                p,
                1.0,
                &self.weight.value,
                1,
                m,
                x.item(i),
                p,
                1,
                0.0,
                &mut ycol,
                p,
            );
            let yi = out.item_mut(i);
            for co in 0..self.out_ch {
                let b = self.bias.value[co];
                let dst = &mut yi[co * oh * ow..(co + 1) * oh * ow];
                for d in 0..4 {
                    let (dy, dx) = (d / 2, d % 2);
                    let src = &ycol[(co * 4 + d) * p..(co * 4 + d + 1) * p];
                    for yy in 0..x.h {
                        let drow = &mut dst[(2 * yy + dy) * ow..];
                        for xx in 0..x.w {
                            drow[2 * xx + dx] = src[yy * x.w + xx] + b;
                        }
                    }
                }
            }
        }
        out
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let y = self.infer(x);
        self.cache = Some(x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let x = self.cache.take().expect("deconv backward without forward");
        let p = x.plane();
        let m = self.out_ch * 4;
        let (oh, ow) = (dy.h, dy.w);
        let mut dx = Tensor::zeros(x.n, x.c, x.h, x.w);
        let mut dcol = vec![0.0f32; m * p];
        for i in 0..x.n {
            let dyi = dy.item(i);
            for co in 0..self.out_ch {
                let src = &dyi[co * oh * ow..(co + 1) * oh * ow];
                self.bias.grad[co] += src.iter().sum::<f32>();
                for d in 0..4 {
                    let (ddy, ddx) = (d / 2, d % 2);
                    let dst = &mut dcol[(co * 4 + d) * p..(co * 4 + d + 1) * p];
                    for yy in 0..x.h {
                        let srow = &src[(2 * yy + ddy) * ow..];
                        for xx in 0..x.w {
                            dst[yy * x.w + xx] = srow[2 * xx + ddx];
                        }
                    }
                }
            }
            // dW (in × 4out) += X · dcolᵀ
            sgemm(
                self.in_ch,
                p,
                m,
                1.0,
                x.item(i),
                p,
                1,
                &dcol,
                1,
                p,
                1.0,
                &mut self.weight.grad,
                m,
            );
            // dX = W · dcol
            sgemm(
                self.in_ch,
                m,
                p,
                1.0,
                &self.weight.value,
                m,
                1,
                &dcol,
                p,
                1,
                0.0,
                dx.item_mut(i),
                p,
            );
        }
        dx
    }
}

impl Module for ConvTranspose2x2 {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Max pooling; padded positions never win.
#[derive(Clone, Debug)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    cache: Option<(Vec<u32>, [usize; 4])>,
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel,
            stride,
            pad,
            cache: None,
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn run(&self, x: &Tensor, mut argmax: Option<&mut Vec<u32>>) -> Tensor {
        let (oh, ow) = self.out_size(x.h, x.w);
        let mut out = Tensor::zeros(x.n, x.c, oh, ow);
        if let Some(a) = argmax.as_deref_mut() {
            a.clear();
            a.reserve(out.data.len());
        }
        let planes = x.n * x.c;
        for pl in 0..planes {
            let src = &x.data[pl * x.h * x.w..(pl + 1) * x.h * x.w];
            let dst = &mut out.data[pl * oh * ow..(pl + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_i = 0u32;
                    for ky in 0..self.kernel {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        for kx in 0..self.kernel {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= x.w as isize {
                                continue;
                            }
                            let idx = iy as usize * x.w + ix as usize;
                            if src[idx] > best {
                                best = src[idx];
                                best_i = idx as u32;
                            }
                        }
                    }
                    dst[oy * ow + ox] = best;
                    if let Some(a) = argmax.as_deref_mut() {
                        a.push(best_i);
                    }
                }
            }
        }
        out
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        self.run(x, None)
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let mut arg = Vec::new();
        let y = self.run(x, Some(&mut arg));
        self.cache = Some((arg, x.shape()));
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let (arg, [n, c, h, w]) = self.cache.take().expect("maxpool backward without forward");
        let mut dx = Tensor::zeros(n, c, h, w);
        let op = dy.plane();
        for pl in 0..n * c {
            let dst = &mut dx.data[pl * h * w..(pl + 1) * h * w];
            let g = &dy.data[pl * op..(pl + 1) * op];
            let a = &arg[pl * op..(pl + 1) * op];
            for (&gi, &ai) in g.iter().zip(a) {
                dst[ai as usize] += gi;
            }
        }
        dx
    }
}

/// 2x2 average pooling with stride 2.
#[derive(Clone, Debug, Default)]
pub struct AvgPool2 {
    in_shape: Option<[usize; 4]>,
}

impl AvgPool2 {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        let (oh, ow) = (x.h / 2, x.w / 2);
        let mut out = Tensor::zeros(x.n, x.c, oh, ow);
        for pl in 0..x.n * x.c {
            let src = &x.data[pl * x.h * x.w..(pl + 1) * x.h * x.w];
            let dst = &mut out.data[pl * oh * ow..(pl + 1) * oh * ow];
            for oy in 0..oh {
                let r0 = &src[2 * oy * x.w..];
                let r1 = &src[(2 * oy + 1) * x.w..];
                for ox in 0..ow {
                    dst[oy * ow + ox] =
                        0.25 * (r0[2 * ox] + r0[2 * ox + 1] + r1[2 * ox] + r1[2 * ox + 1]);
                }
            }
        }
        out
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        self.in_shape = Some(x.shape());
        self.infer(x)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let [n, c, h, w] = self.in_shape.take().expect("avgpool backward without forward");
        let mut dx = Tensor::zeros(n, c, h, w);
        let (oh, ow) = (dy.h, dy.w);
        for pl in 0..n * c {
            let g = &dy.data[pl * oh * ow..(pl + 1) * oh * ow];
            let dst = &mut dx.data[pl * h * w..(pl + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let v = 0.25 * g[oy * ow + ox];
                    for (dy_, dx_) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        dst[(2 * oy + dy_) * w + 2 * ox + dx_] = v;
                    }
                }
            }
        }
        dx
    }
}

/// Per-channel batch normalisation with learned affine and running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    cache: Option<(Tensor, Vec<f32>)>,
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            channels,
            gamma: Param::new(format!("{name}.gamma"), &[channels], ParamInit::Ones, rng),
            beta: Param::new(format!("{name}.beta"), &[channels], ParamInit::Zeros, rng),
            running_mean: Param::buffer(format!("{name}.running_mean"), &[channels], 0.0),
            running_var: Param::buffer(format!("{name}.running_var"), &[channels], 1.0),
            cache: None,
        }
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.c, self.channels, "{}: channels", self.gamma.name);
        let mut out = x.clone();
        let p = x.plane();
        for c in 0..x.c {
            let inv = 1.0 / (self.running_var.value[c] + BN_EPS).sqrt();
            let scale = self.gamma.value[c] * inv;
            let shift = self.beta.value[c] - self.running_mean.value[c] * scale;
            for i in 0..x.n {
                let off = (i * x.c + c) * p;
                for v in &mut out.data[off..off + p] {
                    *v = *v * scale + shift;
                }
            }
        }
        out
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        assert_eq!(x.c, self.channels, "{}: channels", self.gamma.name);
        let p = x.plane();
        let count = (x.n * p) as f64;
        let mut xhat = x.clone();
        let mut out = x.clone();
        let mut inv_std = vec![0.0f32; x.c];
        for c in 0..x.c {
            let mut sum = 0.0f64;
            for i in 0..x.n {
                let off = (i * x.c + c) * p;
                sum += x.data[off..off + p].iter().map(|&v| v as f64).sum::<f64>();
            }
            let mean = sum / count;
            let mut sq = 0.0f64;
            for i in 0..x.n {
                let off = (i * x.c + c) * p;
                sq += x.data[off..off + p]
                    .iter()
                    .map(|&v| {
                        let d = v as f64 - mean;
                        d * d
                    })
                    .sum::<f64>();
            }
            let var = sq / count;
            let inv = 1.0 / (var + BN_EPS as f64).sqrt();
            inv_std[c] = inv as f32;
            let (g, b) = (self.gamma.value[c], self.beta.value[c]);
            let mean32 = mean as f32;
            for i in 0..x.n {
                let off = (i * x.c + c) * p;
                for (xh, o) in xhat.data[off..off + p]
                    .iter_mut()
                    .zip(&mut out.data[off..off + p])
                {
                    let v = (*xh - mean32) * inv as f32;
                    *xh = v;
                    *o = g * v + b;
                }
            }
            let unbiased = if count > 1.0 { sq / (count - 1.0) } else { var };
            let m = BN_MOMENTUM;
            self.running_mean.value[c] = (1.0 - m) * self.running_mean.value[c] + m * mean32;
            self.running_var.value[c] = (1.0 - m) * self.running_var.value[c] + m * unbiased as f32;
        }
        self.cache = Some((xhat, inv_std));
        out
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let (xhat, inv_std) = self.cache.take().expect("batchnorm backward without forward");
        let p = dy.plane();
        let count = (dy.n * p) as f64;
        let mut dx = Tensor::zeros(dy.n, dy.c, dy.h, dy.w);
        for c in 0..dy.c {
            let mut dbeta = 0.0f64;
            let mut dgamma = 0.0f64;
            for i in 0..dy.n {
                let off = (i * dy.c + c) * p;
                for (&g, &xh) in dy.data[off..off + p].iter().zip(&xhat.data[off..off + p]) {
                    dbeta += g as f64;
                    dgamma += (g * xh) as f64;
                }
            }
            self.gamma.grad[c] += dgamma as f32;
            self.beta.grad[c] += dbeta as f32;
            let k = self.gamma.value[c] * inv_std[c];
            let mb = (dbeta / count) as f32;
            let mg = (dgamma / count) as f32;
            for i in 0..dy.n {
                let off = (i * dy.c + c) * p;
                for ((d, &g), &xh) in dx.data[off..off + p]
                    .iter_mut()
                    .zip(&dy.data[off..off + p])
                    .zip(&xhat.data[off..off + p])
                {
                    *d = k * (g - mb - xh * mg);
                }
            }
        }
        dx
    }
}

impl Module for BatchNorm2d {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.gamma);
        f(&self.beta);
        f(&self.running_mean);
        f(&self.running_var);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}

pub fn relu(x: &mut Tensor) {
    for v in &mut x.data {
        *v = v.max(0.0);
    }
}

/// Gradient through a ReLU given its output.
pub fn relu_backward(y: &Tensor, dy: &mut Tensor) {
    for (d, &o) in dy.data.iter_mut().zip(&y.data) {
        if o <= 0.0 {
            *d = 0.0;
        }
    }
}

pub fn sigmoid(x: &mut Tensor) {
    for v in &mut x.data {
        *v = 1.0 / (1.0 + (-*v).exp());
    }
}

/// Gradient through a sigmoid given its output.
pub fn sigmoid_backward(y: &Tensor, dy: &mut Tensor) {
    for (d, &o) in dy.data.iter_mut().zip(&y.data) {
        *d *= o * (1.0 - o);
    }
}

/// Concatenates along channels; `a` first.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!((a.n, a.h, a.w), (b.n, b.h, b.w), "concat spatial mismatch");
    let mut out = Tensor::zeros(a.n, a.c + b.c, a.h, a.w);
    for i in 0..a.n {
        let dst = out.item_mut(i);
        let la = a.item_len();
        dst[..la].copy_from_slice(a.item(i));
        dst[la..].copy_from_slice(b.item(i));
    }
    out
}

/// Inverse of [`concat_channels`]: the first `ca` channels and the rest.
pub fn split_channels(x: &Tensor, ca: usize) -> (Tensor, Tensor) {
    let mut a = Tensor::zeros(x.n, ca, x.h, x.w);
    let mut b = Tensor::zeros(x.n, x.c - ca, x.h, x.w);
    let la = a.item_len();
    for i in 0..x.n {
        let src = x.item(i);
        a.item_mut(i).copy_from_slice(&src[..la]);
        b.item_mut(i).copy_from_slice(&src[la..]);
    }
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor {
        let data = (0..n * c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(n, c, h, w, data)
    }

    fn dot(a: &Tensor, b: &Tensor) -> f64 {
        a.data.iter().zip(&b.data).map(|(&x, &y)| x as f64 * y as f64).sum()
    }

    /// Direct-loop convolution used as the reference for the im2col path.
    fn naive_conv(conv: &Conv2d, x: &Tensor) -> Tensor {
        let (oh, ow) = conv.out_size(x.h, x.w);
        let k = conv.kernel;
        let mut out = Tensor::zeros(x.n, conv.out_ch, oh, ow);
        for i in 0..x.n {
            for co in 0..conv.out_ch {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = conv.bias.as_ref().map_or(0.0, |b| b.value[co] as f64);
                        for ci in 0..conv.in_ch {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                                    let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                        continue;
                                    }
                                    let xv = x.data[((i * x.c + ci) * x.h + iy as usize) * x.w + ix as usize];
                                    let wv = conv.weight.value[((co * conv.in_ch + ci) * k + ky) * k + kx];
                                    acc += xv as f64 * wv as f64;
                                }
                            }
                        }
                        out.data[((i * conv.out_ch + co) * oh + oy) * ow + ox] = acc as f32;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(k, s, p) in &[(3, 1, 1), (1, 1, 0), (7, 2, 3), (3, 2, 1)] {
            let conv = Conv2d::new("c", 3, 4, k, s, p, true, &mut rng);
            let x = rand_tensor(&mut rng, 2, 3, 9, 8);
            let a = conv.infer(&x);
            let b = naive_conv(&conv, &x);
            assert_eq!(a.shape(), b.shape());
            for (u, v) in a.data.iter().zip(&b.data) {
                assert!((u - v).abs() < 1e-4, "k={k} s={s}: {u} vs {v}");
            }
        }
    }

    // The layers below are linear in their inputs and weights, so the
    // adjoint identity <dy, J·v> = <Jᵀ·dy, v> checks backward exactly.
    #[test]
    fn conv_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(k, s, p) in &[(3, 1, 1), (1, 1, 0), (7, 2, 3)] {
            let mut conv = Conv2d::new("c", 3, 5, k, s, p, false, &mut rng);
            let x = rand_tensor(&mut rng, 2, 3, 8, 8);
            let y = conv.forward(&x);
            let dy = rand_tensor(&mut rng, y.n, y.c, y.h, y.w);
            let dx = conv.backward(&dy);
            // Input adjoint.
            let v = rand_tensor(&mut rng, 2, 3, 8, 8);
            let lhs = dot(&dy, &conv.infer(&v));
            let rhs = dot(&dx, &v);
            assert!((lhs - rhs).abs() < 1e-3 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
            // Weight adjoint: y is linear in W for fixed x.
            let dw = conv.weight.grad.clone();
            let mut probe = conv.clone();
            probe.weight.value = (0..dw.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let lhs = dot(&dy, &probe.infer(&x));
            let rhs: f64 = dw
                .iter()
                .zip(&probe.weight.value)
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum();
            assert!((lhs - rhs).abs() < 1e-3 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn deconv_upsamples_and_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut up = ConvTranspose2x2::new("u", 3, 2, &mut rng);
        let x = rand_tensor(&mut rng, 2, 3, 4, 5);
        let y = up.forward(&x);
        assert_eq!(y.shape(), [2, 2, 8, 10]);
        // Spot-check one output against the definition.
        let (co, yy, xx) = (1, 5, 6);
        let mut acc = up.bias.value[co];
        for ci in 0..3 {
            let w = up.weight.value[((ci * 2 + co) * 2 + yy % 2) * 2 + xx % 2];
            acc += w * x.data[(ci * 4 + yy / 2) * 5 + xx / 2];
        }
        assert!((y.data[(co * 8 + yy) * 10 + xx] - acc).abs() < 1e-5);

        let dy = rand_tensor(&mut rng, 2, 2, 8, 10);
        let dx = up.backward(&dy);
        let v = rand_tensor(&mut rng, 2, 3, 4, 5);
        let mut nobias = up.clone();
        nobias.bias.value = vec![0.0; 2];
        let lhs = dot(&dy, &nobias.infer(&v));
        let rhs = dot(&dx, &v);
        assert!((lhs - rhs).abs() < 1e-3 * lhs.abs().max(1.0));
        let bias_grad: f32 = dy.data[..80].iter().chain(&dy.data[160..240]).sum();
        assert!((up.bias.grad[0] - bias_grad).abs() < 1e-3);
    }

    #[test]
    fn pools() {
        let x = Tensor::from_vec(1, 1, 2, 4, vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 8.0, 1.0]);
        let mut mp = MaxPool2d::new(2, 2, 0);
        assert_eq!(mp.forward(&x).data, vec![5.0, 8.0]);
        let dx = mp.backward(&Tensor::from_vec(1, 1, 1, 2, vec![1.0, 2.0]));
        assert_eq!(dx.data, vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0]);

        let mut ap = AvgPool2::new();
        assert_eq!(ap.forward(&x).data, vec![3.25, 2.75]);
        let dx = ap.backward(&Tensor::from_vec(1, 1, 1, 2, vec![4.0, 8.0]));
        assert_eq!(dx.data, vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);

        // 3x3 stride-2 pad-1 pooling halves even sizes.
        let mp = MaxPool2d::new(3, 2, 1);
        assert_eq!(mp.out_size(64, 64), (32, 32));
    }

    #[test]
    fn batchnorm_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut bn = BatchNorm2d::new("bn", 2, &mut rng);
        bn.gamma.value = vec![1.3, 0.7];
        bn.beta.value = vec![0.1, -0.2];
        let x = rand_tensor(&mut rng, 3, 2, 3, 3);
        let g = rand_tensor(&mut rng, 3, 2, 3, 3);
        let _ = bn.forward(&x);
        let dx = bn.backward(&g);
        let loss = |bn: &BatchNorm2d, x: &Tensor| dot(&bn.clone().forward(x), &g);
        let h = 1e-2f32;
        for idx in [0, 7, 20, 53] {
            let mut xp = x.clone();
            xp.data[idx] += h;
            let mut xm = x.clone();
            xm.data[idx] -= h;
            let num = (loss(&bn, &xp) - loss(&bn, &xm)) / (2.0 * h as f64);
            assert!((num - dx.data[idx] as f64).abs() < 1e-2, "{num} vs {}", dx.data[idx]);
        }
        let gamma_grad = bn.gamma.grad[1] as f64;
        let mut bp = bn.clone();
        bp.gamma.value[1] += h;
        let mut bm = bn.clone();
        bm.gamma.value[1] -= h;
        let num = (loss(&bp, &x) - loss(&bm, &x)) / (2.0 * h as f64);
        assert!((num - gamma_grad).abs() < 1e-2);
    }

    #[test]
    fn batchnorm_running_stats_and_inference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut bn = BatchNorm2d::new("bn", 1, &mut rng);
        let x = Tensor::from_vec(1, 1, 1, 4, vec![1.0, 2.0, 3.0, 4.0]);
        let y = bn.forward(&x);
        let mean: f32 = y.data.iter().sum::<f32>() / 4.0;
        assert!(mean.abs() < 1e-6);
        assert!((bn.running_mean.value[0] - 0.25).abs() < 1e-6);
        // Unbiased variance of 1..4 is 5/3.
        assert!((bn.running_var.value[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-6);
        let inf = bn.infer(&x);
        assert_eq!(inf, bn.infer(&x));
    }

    #[test]
    fn concat_split_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = rand_tensor(&mut rng, 2, 3, 2, 2);
        let b = rand_tensor(&mut rng, 2, 1, 2, 2);
        let c = concat_channels(&a, &b);
        assert_eq!(c.shape(), [2, 4, 2, 2]);
        let (a2, b2) = split_channels(&c, 3);
        assert_eq!((a2, b2), (a, b));
    }
}

//! Minimal CPU layer engine for the segmentation networks.
//!
//! Layers run in NCHW `f32` layout with explicit `forward` (training mode,
//! caches activations) / `backward` pairs, plus a cache-free `infer` that
//! takes `&self`. Convolutions lower to `sgemm` through im2col. Everything is
//! single-threaded and deterministic: the same inputs give bitwise-identical
//! outputs and gradients.

mod adam;
mod layers;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use layers::{
    concat_channels, relu, relu_backward, sigmoid, sigmoid_backward, split_channels, AvgPool2,
    BatchNorm2d, Conv2d, ConvTranspose2x2, MaxPool2d, BN_EPS, BN_MOMENTUM,
};
pub use tensor::{Param, ParamInit, Tensor};

/// Anything that owns parameters (and buffers).
pub trait Module {
    /// Visits every parameter in a fixed order.
    fn visit(&self, f: &mut dyn FnMut(&Param));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    fn num_trainable(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| {
            if p.trainable {
                n += p.value.len()
            }
        });
        n
    }

    fn zero_grad(&mut self) {
        self.visit_mut(&mut |p| p.grad.iter_mut().for_each(|g| *g = 0.0));
    }
}

/// Row-major single-precision GEMM: `c = alpha·a·b + beta·c` over strided views.
#[allow(clippy::too_many_arguments)]
pub(crate) fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    rsa: usize,
    csa: usize,
    b: &[f32],
    rsb: usize,
    csb: usize,
    beta: f32,
    c: &mut [f32],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa, "lhs out of bounds");
    assert!(k == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb, "rhs out of bounds");
    assert!(c.len() > (m - 1) * rsc + (n - 1), "output out of bounds");
    // SAFETY: the asserts above bound every index touched through the strides.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

//! Trainable-parameter arithmetic derived from the architecture description
//! alone, independent of the layer code. Used to cross-check construction.

use super::{Arch, ModelSpec};

/// One trainable layer of the symbolic plan.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerPlan {
    Conv { k: usize, in_ch: usize, out_ch: usize, bias: bool },
    /// 2x2 stride-2 transposed convolution, always with bias.
    UpConv { in_ch: usize, out_ch: usize },
    BatchNorm { ch: usize },
}

impl LayerPlan {
    pub fn params(&self) -> usize {
        match *self {
            LayerPlan::Conv { k, in_ch, out_ch, bias } => k * k * in_ch * out_ch + if bias { out_ch } else { 0 },
            LayerPlan::UpConv { in_ch, out_ch } => 4 * in_ch * out_ch + out_ch,
            LayerPlan::BatchNorm { ch } => 2 * ch,
        }
    }
}

pub fn layer_plan(spec: &ModelSpec) -> Vec<LayerPlan> {
    match spec.arch {
        Arch::Unet => unet_plan(&spec.unet_channels),
        Arch::DenseUnet => dense_plan(&spec.densenet_block_sizes, spec.densenet_growth, &spec.up_growth_rates),
    }
}

pub fn symbolic_param_count(spec: &ModelSpec) -> usize {
    layer_plan(spec).iter().map(LayerPlan::params).sum()
}

fn conv(k: usize, in_ch: usize, out_ch: usize, bias: bool) -> LayerPlan {
    LayerPlan::Conv { k, in_ch, out_ch, bias }
}

fn unet_plan(widths: &[usize]) -> Vec<LayerPlan> {
    let mut plan = Vec::new();
    let mut prev = 1;
    for &c in widths {
        plan.push(conv(3, prev, c, true));
        plan.push(conv(3, c, c, true));
        prev = c;
    }
    for &c in widths.iter().rev().skip(1) {
        plan.push(LayerPlan::UpConv { in_ch: prev, out_ch: c });
        // Skip and upsampled features are concatenated: 2c inputs.
        plan.push(conv(3, 2 * c, c, true));
        plan.push(conv(3, c, c, true));
        prev = c;
    }
    plan.push(conv(1, prev, 1, true));
    plan
}

const STEM: usize = 64;

fn dense_block(plan: &mut Vec<LayerPlan>, in_ch: usize, layers: usize, growth: usize) -> usize {
    for i in 0..layers {
        let c = in_ch + i * growth;
        plan.push(LayerPlan::BatchNorm { ch: c });
        plan.push(conv(1, c, 4 * growth, false));
        plan.push(LayerPlan::BatchNorm { ch: 4 * growth });
        plan.push(conv(3, 4 * growth, growth, false));
    }
    in_ch + layers * growth
}

fn dense_plan(blocks: &[usize], growth: usize, up: &[usize]) -> Vec<LayerPlan> {
    let mut plan = vec![conv(7, 1, STEM, false), LayerPlan::BatchNorm { ch: STEM }];
    let mut ch = STEM;
    // Skip widths, shallowest first: stem output, then each block except the last.
    let mut skips = vec![STEM];
    for (i, &n) in blocks.iter().enumerate() {
        ch = dense_block(&mut plan, ch, n, growth);
        if i + 1 < blocks.len() {
            skips.push(ch);
            plan.push(LayerPlan::BatchNorm { ch });
            plan.push(conv(1, ch, ch / 2, false));
            ch /= 2;
        }
    }
    plan.push(LayerPlan::BatchNorm { ch });
    // Decoder consumes skips deepest first; the full-resolution stage has none.
    let mut skip_iter = skips.into_iter().rev();
    for &g in up {
        let skip = skip_iter.next().unwrap_or(0);
        let up_ch = if skip > 0 { skip } else { STEM / 2 };
        plan.push(LayerPlan::UpConv { in_ch: ch, out_ch: up_ch });
        ch = dense_block(&mut plan, up_ch + skip, 1, g);
    }
    plan.push(conv(1, ch, 1, true));
    plan
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_counts() {
        let unet = symbolic_param_count(&ModelSpec::new(Arch::Unet, 128));
        let dense = symbolic_param_count(&ModelSpec::new(Arch::DenseUnet, 128));
        assert_eq!(unet, 7_759_521);
        assert_eq!(dense, 16_898_855);
        assert!(unet < dense);
    }

    #[test]
    fn dense_block_one_width() {
        let mut plan = Vec::new();
        assert_eq!(dense_block(&mut plan, STEM, 6, 32), STEM + 6 * 32);
        assert_eq!(plan.len(), 24);
    }
}

//! The two segmentation architectures and heatmap inference.
//!
//! Inference (`infer`, [`predict_heatmap`]) borrows the model immutably and
//! touches no shared state, so a loaded model may serve concurrent read-only
//! predictions from several threads. Training (`forward`/`backward`) needs
//! exclusive access.

pub mod counter;
mod checkpoint;
mod dense_unet;
mod unet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, Preprocessing, TrainingMeta};
pub use dense_unet::{DenseUNet, BOTTLENECK_FACTOR, STEM_CHANNELS};
pub use counter::{layer_plan, symbolic_param_count, LayerPlan};
pub use unet::UNet;

use crate::contour::Heatmap;
use crate::error::{invalid, Error, Result};
use crate::nn::{Module, Param, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Unet,
    DenseUnet,
}

impl Arch {
    pub fn as_str(&self) -> &'static str {
        match self {
            Arch::Unet => "unet",
            Arch::DenseUnet => "dense_unet",
        }
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "unet" | "u_net" => Ok(Arch::Unet),
            "dense_unet" | "denseunet" | "dense" => Ok(Arch::DenseUnet),
            other => Err(invalid(format!("unknown architecture {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub arch: Arch,
    /// Side length of the square network input.
    pub input_size: usize,
    pub unet_channels: Vec<usize>,
    pub densenet_block_sizes: Vec<usize>,
    pub densenet_growth: usize,
    pub up_growth_rates: Vec<usize>,
    /// Seed for weight initialisation.
    pub seed: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            arch: Arch::Unet,
            input_size: 128,
            unet_channels: vec![32, 64, 128, 256, 512],
            densenet_block_sizes: vec![6, 12, 24, 16],
            densenet_growth: 32,
            up_growth_rates: vec![16, 24, 12, 6, 6],
            seed: 0,
        }
    }
}

impl ModelSpec {
    pub fn new(arch: Arch, input_size: usize) -> Self {
        Self {
            arch,
            input_size,
            ..Self::default()
        }
    }

    /// Total spatial downsampling factor of the encoder.
    pub fn downsampling(&self) -> usize {
        match self.arch {
            Arch::Unet => 1 << self.unet_channels.len().saturating_sub(1),
            // Stem conv and max pool, then one pool per transition.
            Arch::DenseUnet => 1 << (self.densenet_block_sizes.len() + 1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.arch {
            Arch::Unet => {
                if self.unet_channels.is_empty() || self.unet_channels.contains(&0) {
                    return Err(invalid("unet_channels must be non-empty and positive"));
                }
            }
            Arch::DenseUnet => {
                if self.densenet_block_sizes.is_empty() || self.densenet_block_sizes.contains(&0) {
                    return Err(invalid("densenet_block_sizes must be non-empty and positive"));
                }
                if self.densenet_growth == 0 {
                    return Err(invalid("densenet_growth must be positive"));
                }
                if self.up_growth_rates.len() != self.densenet_block_sizes.len() + 1
                    || self.up_growth_rates.contains(&0)
                {
                    return Err(invalid(format!(
                        "up_growth_rates needs {} positive entries (one per dense block plus one)",
                        self.densenet_block_sizes.len() + 1
                    )));
                }
            }
        }
        let factor = self.downsampling();
        if self.input_size == 0 || self.input_size % factor != 0 {
            return Err(invalid(format!(
                "{} input size {} must be a positive multiple of {factor}",
                self.arch.as_str(),
                self.input_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Net {
    Unet(UNet),
    DenseUnet(DenseUNet),
}

/// A constructed network together with the spec it was built from.
#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    net: Net,
    initialized: bool,
}

impl Model {
    /// Builds the architecture described by `spec` with He-uniform weights
    /// drawn from `spec.seed`.
    pub fn build(spec: &ModelSpec) -> Result<Self> {
        let mut m = Self::skeleton(spec)?;
        m.initialized = true;
        Ok(m)
    }

    /// Same structure as [`Model::build`] but flagged as holding no trained or
    /// initialised weights until [`Model::load_params`] succeeds.
    pub fn skeleton(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let net = match spec.arch {
            Arch::Unet => Net::Unet(UNet::new(&spec.unet_channels, &mut rng)),
            Arch::DenseUnet => Net::DenseUnet(DenseUNet::new(
                &spec.densenet_block_sizes,
                spec.densenet_growth,
                &spec.up_growth_rates,
                &mut rng,
            )),
        };
        Ok(Self {
            spec: spec.clone(),
            net,
            initialized: false,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn as_unet(&self) -> Option<&UNet> {
        match &self.net {
            Net::Unet(u) => Some(u),
            Net::DenseUnet(_) => None,
        }
    }

    pub fn as_dense_unet(&self) -> Option<&DenseUNet> {
        match &self.net {
            Net::DenseUnet(d) => Some(d),
            Net::Unet(_) => None,
        }
    }

    /// Inference-mode pass over an `N x 1 x S x S` batch.
    pub fn infer(&self, x: &Tensor) -> Tensor {
        match &self.net {
            Net::Unet(u) => u.infer(x),
            Net::DenseUnet(d) => d.infer(x),
        }
    }

    /// Training-mode pass; caches activations for [`Model::backward`].
    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        match &mut self.net {
            Net::Unet(u) => u.forward(x),
            Net::DenseUnet(d) => d.forward(x),
        }
    }

    /// Accumulates parameter gradients from dL/d(output probability).
    pub fn backward(&mut self, dprob: &Tensor) {
        match &mut self.net {
            Net::Unet(u) => {
                u.backward(dprob);
            }
            Net::DenseUnet(d) => {
                d.backward(dprob);
            }
        }
    }

    /// Copies parameter values from another source in visit order, checking
    /// names and shapes.
    pub fn load_params(&mut self, mut source: impl FnMut(&str, &[usize]) -> Result<Vec<f32>>) -> Result<()> {
        let mut err = None;
        self.visit_mut(&mut |p| {
            if err.is_some() {
                return;
            }
            match source(&p.name, &p.shape) {
                Ok(v) if v.len() == p.value.len() => p.value = v,
                Ok(v) => {
                    err = Some(Error::Checkpoint(format!(
                        "{}: expected {} values, got {}",
                        p.name,
                        p.value.len(),
                        v.len()
                    )))
                }
                Err(e) => err = Some(e),
            }
        });
        match err {
            Some(e) => Err(e),
            None => {
                self.initialized = true;
                Ok(())
            }
        }
    }
}

impl Module for Model {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        match &self.net {
            Net::Unet(u) => u.visit(f),
            Net::DenseUnet(d) => d.visit(f),
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        match &mut self.net {
            Net::Unet(u) => u.visit_mut(f),
            Net::DenseUnet(d) => d.visit_mut(f),
        }
    }
}

/// Shorthand for `Model::build` with a U-Net spec.
pub fn build_unet(spec: &ModelSpec) -> Result<Model> {
    if spec.arch != Arch::Unet {
        return Err(invalid("build_unet needs arch = unet"));
    }
    Model::build(spec)
}

pub fn build_dense_unet(spec: &ModelSpec) -> Result<Model> {
    if spec.arch != Arch::DenseUnet {
        return Err(invalid("build_dense_unet needs arch = dense_unet"));
    }
    Model::build(spec)
}

/// Packs normalised frames into an `N x 1 x S x S` tensor.
pub fn frames_to_tensor(frames: &[&Heatmap]) -> Result<Tensor> {
    let first = frames.first().ok_or(Error::EmptyDataset)?;
    let (w, h) = (first.width(), first.height());
    let mut data = Vec::with_capacity(frames.len() * w * h);
    for f in frames {
        if (f.width(), f.height()) != (w, h) {
            return Err(Error::ShapeMismatch("frames in a batch differ in size".into()));
        }
        data.extend_from_slice(f.values());
    }
    Ok(Tensor::from_vec(frames.len(), 1, h, w, data))
}

/// Runs one normalised grayscale frame (values in `[0, 1]`, sized to the
/// model input) through the network in inference mode.
pub fn predict_heatmap(model: &Model, frame: &Heatmap) -> Result<Heatmap> {
    Ok(predict_batch(model, &[frame])?.remove(0))
}

pub fn predict_batch(model: &Model, frames: &[&Heatmap]) -> Result<Vec<Heatmap>> {
    if !model.is_initialized() {
        return Err(Error::Checkpoint("model weights are not initialised".into()));
    }
    let s = model.spec().input_size;
    if let Some(f) = frames.iter().find(|f| f.width() != s || f.height() != s) {
        return Err(Error::ShapeMismatch(format!(
            "frame is {}x{}, model expects {s}x{s}",
            f.width(),
            f.height()
        )));
    }
    let x = frames_to_tensor(frames)?;
    let y = model.infer(&x);
    (0..y.n)
        .map(|i| {
            let v = y.item(i).iter().map(|v| v.clamp(0.0, 1.0)).collect();
            Heatmap::from_values(s, s, v)
        })
        .collect()
}

use std::fs;
use std::path::{Path, PathBuf};

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use super::{Model, ModelSpec};
use crate::contour::MaskConfig;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::nn::{Module, BN_EPS, BN_MOMENTUM};

pub const WEIGHTS_FILE: &str = "model.safetensors";
pub const SIDECAR_FILE: &str = "model.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing {
    pub input_size: usize,
    /// Grayscale intensities are mapped linearly onto this range.
    pub intensity_range: [f32; 2],
}

impl Preprocessing {
    pub fn for_spec(spec: &ModelSpec) -> Self {
        Self {
            input_size: spec.input_size,
            intensity_range: [0.0, 1.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub loss: LossConfig,
    pub mask: MaskConfig,
    pub epochs: usize,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub bn_momentum: f32,
    pub bn_eps: f32,
}

impl TrainingMeta {
    pub fn bn_defaults() -> (f32, f32) {
        (BN_MOMENTUM, BN_EPS)
    }
}

/// Trained model plus everything needed to reproduce its inputs.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub preprocessing: Preprocessing,
    pub training_meta: Option<TrainingMeta>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    spec: ModelSpec,
    preprocessing: Preprocessing,
    training_meta: Option<TrainingMeta>,
    weights: String,
}

impl Checkpoint {
    pub fn new(model: Model, training_meta: Option<TrainingMeta>) -> Self {
        let preprocessing = Preprocessing::for_spec(model.spec());
        Self {
            model,
            preprocessing,
            training_meta,
        }
    }

    pub fn spec(&self) -> &ModelSpec {
        self.model.spec()
    }

    /// Writes `model.safetensors` and the `model.json` sidecar into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut named: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        self.model.visit(&mut |p| {
            let bytes = p.value.iter().flat_map(|v| v.to_le_bytes()).collect();
            named.push((p.name.clone(), p.shape.clone(), bytes));
        });
        let views = named
            .iter()
            .map(|(n, s, b)| {
                TensorView::new(Dtype::F32, s.clone(), b)
                    .map(|v| (n.as_str(), v))
                    .map_err(|e| Error::Checkpoint(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let blob =
            safetensors::serialize(views, None).map_err(|e| Error::Checkpoint(e.to_string()))?;
        fs::write(dir.join(WEIGHTS_FILE), blob)?;
        let sidecar = Sidecar {
            spec: self.model.spec().clone(),
            preprocessing: self.preprocessing.clone(),
            training_meta: self.training_meta.clone(),
            weights: WEIGHTS_FILE.into(),
        };
        fs::write(dir.join(SIDECAR_FILE), serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }

    /// Loads from a checkpoint directory or its sidecar JSON path, rejecting
    /// any weight whose name or shape disagrees with the rebuilt spec.
    pub fn load(path: &Path) -> Result<Self> {
        let sidecar_path: PathBuf = if path.is_dir() {
            path.join(SIDECAR_FILE)
        } else {
            path.to_path_buf()
        };
        let text = fs::read_to_string(&sidecar_path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", sidecar_path.display())))?;
        let sidecar: Sidecar = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", sidecar_path.display())))?;
        let weights_path = sidecar_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(&sidecar.weights);
        let blob = fs::read(&weights_path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", weights_path.display())))?;
        let tensors =
            SafeTensors::deserialize(&blob).map_err(|e| Error::Checkpoint(e.to_string()))?;

        let mut model = Model::skeleton(&sidecar.spec)?;
        let mut expected = 0usize;
        model.load_params(|name, shape| {
            expected += 1;
            let view = tensors
                .tensor(name)
                .map_err(|_| Error::Checkpoint(format!("missing weight {name}")))?;
            if view.dtype() != Dtype::F32 || view.shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "{name}: stored {:?} {:?}, model expects F32 {shape:?}",
                    view.dtype(),
                    view.shape()
                )));
            }
            Ok(view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect())
        })?;
        if tensors.len() != expected {
            return Err(Error::Checkpoint(format!(
                "weight file holds {} tensors, model has {expected}",
                tensors.len()
            )));
        }
        Ok(Self {
            model,
            preprocessing: sidecar.preprocessing,
            training_meta: sidecar.training_meta,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contour::Heatmap;
    use crate::models::{predict_heatmap, Arch};

    #[test]
    fn save_load_reproduces_predictions_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ModelSpec {
            arch: Arch::DenseUnet,
            input_size: 32,
            densenet_block_sizes: vec![2, 2],
            densenet_growth: 4,
            up_growth_rates: vec![2, 2, 2],
            seed: 3,
            ..ModelSpec::default()
        };
        let mut model = Model::build(&spec).unwrap();
        // Perturb running statistics so buffers are exercised too.
        model.visit_mut(&mut |p| {
            if !p.trainable {
                p.value.iter_mut().for_each(|v| *v += 0.25);
            }
        });
        let ck = Checkpoint::new(model, None);
        ck.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path()).unwrap();
        let frame =
            Heatmap::from_values(32, 32, (0..1024).map(|i| (i % 17) as f32 / 16.0).collect())
                .unwrap();
        let a = predict_heatmap(&ck.model, &frame).unwrap();
        let b = predict_heatmap(&back.model, &frame).unwrap();
        assert_eq!(a.values(), b.values());
        assert_eq!(back.preprocessing.input_size, 32);
    }

    #[test]
    fn load_rejects_spec_weight_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ModelSpec {
            unet_channels: vec![4, 8],
            input_size: 16,
            ..ModelSpec::default()
        };
        Checkpoint::new(Model::build(&spec).unwrap(), None)
            .save(dir.path())
            .unwrap();
        // Rewrite the sidecar with a wider network.
        let side = dir.path().join(SIDECAR_FILE);
        let mut json: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&side).unwrap()).unwrap();
        json["spec"]["unet_channels"] = serde_json::json!([6, 8]);
        fs::write(&side, json.to_string()).unwrap();
        assert!(matches!(Checkpoint::load(dir.path()), Err(Error::Checkpoint(_))));
        assert!(Checkpoint::load(&dir.path().join("nope")).is_err());
    }
}

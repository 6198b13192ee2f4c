//! Minibatch Adam training with checkpoint selection by validation loss.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contour::{contour_to_mask, Heatmap, MaskConfig};
use crate::data::{rescale_contour, resize_frame, AffineParams, AugmentationConfig, Dataset};
use crate::error::{invalid, Error, Result};
use crate::losses::{class_weights_from_dataset, loss_value, loss_value_and_grad, LossConfig, LossKind, PredictionPair};
use crate::models::{frames_to_tensor, predict_batch, Checkpoint, Model, TrainingMeta};
use crate::nn::{Adam, AdamConfig, Module, Tensor, BN_EPS, BN_MOMENTUM};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub optimizer: Optimizer,
    pub loss: LossConfig,
    pub augmentation: Option<AugmentationConfig>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 1e-4,
            epochs: 30,
            optimizer: Optimizer::Adam,
            loss: LossConfig::default(),
            augmentation: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(invalid("epochs must be at least 1"));
        }
        self.loss.validate()?;
        if let Some(a) = &self.augmentation {
            a.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainingLog {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for r in &self.epochs {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let epochs = r.deserialize().collect::<std::result::Result<Vec<EpochRecord>, _>>()?;
        Ok(Self { epochs })
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs
            .iter()
            .min_by(|a, b| a.val_loss.total_cmp(&b.val_loss))
    }
}

/// Frame and mask at network resolution.
struct Prepared {
    frame: Heatmap,
    mask: Heatmap,
}

fn prepare(dataset: &Dataset, size: usize, mask_cfg: &MaskConfig) -> Result<Vec<Prepared>> {
    dataset
        .items
        .iter()
        .map(|it| {
            let (w, h) = (it.frame.width(), it.frame.height());
            let contour = rescale_contour(&it.contour, (w, h), (size, size));
            Ok(Prepared {
                frame: resize_frame(&it.frame, size, size)?,
                mask: contour_to_mask(&contour, mask_cfg, size, size)?,
            })
        })
        .collect()
}

/// Stream seed for one (epoch, item) augmentation draw, independent of batch
/// layout or worker count.
fn draw_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    let mut z = seed
        ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (index as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fills unset class weights from the masks.
fn resolve_loss(loss: &LossConfig, masks: &[Prepared]) -> Result<LossConfig> {
    let mut loss = *loss;
    if loss.kind == LossKind::WeightedCe && (loss.w_pos.is_none() || loss.w_neg.is_none()) {
        let (wp, wn) = class_weights_from_dataset(masks.iter().map(|p| &p.mask))?;
        loss.w_pos.get_or_insert(wp);
        loss.w_neg.get_or_insert(wn);
    }
    Ok(loss)
}

fn mean_loss(model: &Model, items: &[Prepared], loss: &LossConfig) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for chunk in items.chunks(8) {
        let frames: Vec<&Heatmap> = chunk.iter().map(|p| &p.frame).collect();
        let preds = predict_batch(model, &frames)?;
        for (pred, p) in preds.iter().zip(chunk) {
            let s: Vec<f64> = pred.values().iter().map(|&v| v as f64).collect();
            let r: Vec<f64> = p.mask.values().iter().map(|&v| v as f64).collect();
            total += loss_value(PredictionPair::new(&s, &r)?, loss);
        }
    }
    Ok(total / items.len() as f64)
}

/// Mean per-item loss in inference mode without augmentation. Unset weighted
/// crossentropy weights are derived from this dataset's masks.
pub fn evaluate_loss(model: &Model, dataset: &Dataset, loss: &LossConfig, mask_cfg: &MaskConfig) -> Result<f64> {
    loss.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let items = prepare(dataset, model.spec().input_size, mask_cfg)?;
    let loss = resolve_loss(loss, &items)?;
    mean_loss(model, &items, &loss)
}

fn snapshot(model: &Model) -> Vec<Vec<f32>> {
    let mut out = Vec::new();
    model.visit(&mut |p| out.push(p.value.clone()));
    out
}

fn restore(model: &mut Model, values: Vec<Vec<f32>>) {
    let mut it = values.into_iter();
    model.visit_mut(&mut |p| p.value = it.next().expect("snapshot matches model"));
}

pub fn train(model: Model, train_set: &Dataset, val_set: &Dataset, cfg: &TrainConfig, mask_cfg: &MaskConfig) -> Result<(Checkpoint, TrainingLog)> {
    train_with_progress(model, train_set, val_set, cfg, mask_cfg, |_| {})
}

/// As [`train`], calling `on_epoch` after each epoch is logged.
pub fn train_with_progress(
    mut model: Model,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    mask_cfg: &MaskConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Checkpoint, TrainingLog)> {
    cfg.validate()?;
    mask_cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if val_set.is_empty() {
        return Err(invalid("validation set is empty"));
    }
    if !model.is_initialized() {
        return Err(Error::Checkpoint("model weights are not initialised".into()));
    }
    let size = model.spec().input_size;
    let train_items = prepare(train_set, size, mask_cfg)?;
    let val_items = prepare(val_set, size, mask_cfg)?;
    let loss = resolve_loss(&cfg.loss, &train_items)?;

    let mut adam = Adam::new(AdamConfig {
        learning_rate: cfg.learning_rate,
        ..AdamConfig::default()
    });
    let mut log = TrainingLog::default();
    let mut best: Option<(f64, usize, Vec<Vec<f32>>)> = None;
    let plane = size * size;

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..train_items.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(draw_seed(cfg.seed, epoch, usize::MAX)));

        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut frames = Vec::with_capacity(batch.len());
            let mut masks: Vec<f64> = Vec::with_capacity(batch.len() * plane);
            for &i in batch {
                let p = &train_items[i];
                let (frame, mask) = match &cfg.augmentation {
                    Some(aug) => {
                        let mut rng = ChaCha8Rng::seed_from_u64(draw_seed(aug.seed ^ cfg.seed, epoch, i));
                        let params = AffineParams::sample(aug, &mut rng);
                        crate::data::augment_pair(&p.frame, &p.mask, &params)?
                    }
                    None => (p.frame.clone(), p.mask.clone()),
                };
                masks.extend(mask.values().iter().map(|&v| v as f64));
                frames.push(frame);
            }
            let refs: Vec<&Heatmap> = frames.iter().collect();
            let x = frames_to_tensor(&refs)?;
            let y = model.forward(&x);
            let s: Vec<f64> = y.data.iter().map(|&v| v as f64).collect();
            let (value, grad) = loss_value_and_grad(PredictionPair::new(&s, &masks)?, &loss);
            if !value.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite training loss in epoch {epoch}"
                )));
            }
            let dprob = Tensor::from_vec(y.n, y.c, y.h, y.w, grad.iter().map(|&g| g as f32).collect());
            model.backward(&dprob);
            adam.step(&mut model);
            loss_sum += value * batch.len() as f64;
        }
        let train_loss = loss_sum / train_items.len() as f64;
        let val_loss = mean_loss(&model, &val_items, &loss)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged(format!("non-finite validation loss in epoch {epoch}")));
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        log.epochs.push(record);
        if best.as_ref().is_none_or(|b| val_loss < b.0) {
            best = Some((val_loss, epoch, snapshot(&model)));
        }
    }

    let (best_val_loss, best_epoch, weights) = best.expect("at least one epoch");
    restore(&mut model, weights);
    let meta = TrainingMeta {
        loss,
        mask: *mask_cfg,
        epochs: cfg.epochs,
        best_epoch,
        best_val_loss,
        batch_size: cfg.batch_size,
        learning_rate: cfg.learning_rate,
        seed: cfg.seed,
        bn_momentum: BN_MOMENTUM,
        bn_eps: BN_EPS,
    };
    Ok((Checkpoint::new(model, Some(meta)), log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};
    use crate::models::{Arch, ModelSpec};

    fn tiny_spec() -> ModelSpec {
        ModelSpec {
            arch: Arch::Unet,
            input_size: 32,
            unet_channels: vec![4, 8],
            seed: 1,
            ..ModelSpec::default()
        }
    }

    fn tiny_data(n: usize, seed: u64) -> Dataset {
        generate_synthetic(&SyntheticConfig {
            n_frames: n,
            image_size: 32,
            seed,
            ..SyntheticConfig::default()
        })
        .unwrap()
    }

    fn quick_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 3,
            learning_rate: 1e-3,
            epochs,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn single_epoch_returns_epoch_one() {
        let (ck, log) = train(
            Model::build(&tiny_spec()).unwrap(),
            &tiny_data(5, 1),
            &tiny_data(2, 2),
            &quick_cfg(1),
            &MaskConfig::default(),
        )
        .unwrap();
        assert_eq!(log.epochs.len(), 1);
        let meta = ck.training_meta.unwrap();
        assert_eq!(meta.best_epoch, 1);
        assert_eq!(meta.best_val_loss, log.epochs[0].val_loss);
    }

    #[test]
    fn best_checkpoint_matches_log_minimum() {
        let val = tiny_data(3, 4);
        let (ck, log) = train(
            Model::build(&tiny_spec()).unwrap(),
            &tiny_data(6, 3),
            &val,
            &quick_cfg(4),
            &MaskConfig::default(),
        )
        .unwrap();
        assert_eq!(log.epochs.len(), 4);
        let best = log.best().unwrap();
        let meta = ck.training_meta.clone().unwrap();
        assert_eq!(meta.best_val_loss, best.val_loss);
        assert_eq!(meta.best_epoch, best.epoch);
        let again = evaluate_loss(&ck.model, &val, &meta.loss, &MaskConfig::default()).unwrap();
        assert_eq!(again, best.val_loss);
    }

    #[test]
    fn empty_sets_are_rejected() {
        let m = Model::build(&tiny_spec()).unwrap();
        let empty = Dataset::default();
        assert!(train(m.clone(), &tiny_data(3, 1), &empty, &quick_cfg(1), &MaskConfig::default()).is_err());
        assert!(evaluate_loss(&m, &empty, &LossConfig::default(), &MaskConfig::default()).is_err());
    }

    #[test]
    fn weighted_ce_weights_are_recorded() {
        let cfg = TrainConfig {
            loss: LossConfig::new(LossKind::WeightedCe),
            ..quick_cfg(1)
        };
        let (ck, _) = train(
            Model::build(&tiny_spec()).unwrap(),
            &tiny_data(4, 1),
            &tiny_data(2, 2),
            &cfg,
            &MaskConfig::default(),
        )
        .unwrap();
        let loss = ck.training_meta.unwrap().loss;
        assert!(loss.w_pos.unwrap() > loss.w_neg.unwrap());
    }

    #[test]
    fn log_csv_round_trip() {
        let log = TrainingLog {
            epochs: vec![EpochRecord {
                epoch: 1,
                train_loss: 0.5,
                val_loss: 0.25,
                seconds: 1.5,
            }],
        };
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf.clone()).unwrap().starts_with("epoch,train_loss,val_loss,seconds"));
        assert_eq!(TrainingLog::read_csv(&buf[..]).unwrap(), log);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { epochs: 0, ..Default::default() }.validate().is_err());
    }
}

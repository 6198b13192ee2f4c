//! Config-driven runs: one training run, or a sweep over the Cartesian product
//! of loss, data fraction, input size, augmentation and architecture.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::contour::MaskConfig;
use crate::data::{
    datasets_by_split, generate_synthetic, load_manifest, split_dataset, subsample_training,
    AugmentationConfig, Dataset, SyntheticConfig,
};
use crate::error::{invalid, Error, Result};
use crate::losses::{LossConfig, LossKind};
use crate::metrics::EvalReport;
use crate::models::{Arch, Checkpoint, Model, ModelSpec};
use crate::pipeline::evaluate_model;
use crate::plot::{LinePlot, Series};
use crate::postprocess::PostprocessConfig;
use crate::training::{train_with_progress, EpochRecord, TrainConfig, TrainingLog};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    /// Manifest JSON; relative paths resolve against the config file.
    Manifest(PathBuf),
    Synthetic(SyntheticConfig),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticConfig::default())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Sweep {
    pub loss: Option<Vec<LossKind>>,
    pub fraction: Option<Vec<f64>>,
    pub input_size: Option<Vec<usize>>,
    pub augmentation: Option<Vec<bool>>,
    pub arch: Option<Vec<Arch>>,
}

impl Sweep {
    fn validate(&self) -> Result<()> {
        let empty = [
            self.loss.as_ref().map(Vec::len),
            self.fraction.as_ref().map(Vec::len),
            self.input_size.as_ref().map(Vec::len),
            self.augmentation.as_ref().map(Vec::len),
            self.arch.as_ref().map(Vec::len),
        ]
        .contains(&Some(0));
        if empty {
            return Err(invalid("sweep axes must be non-empty when present"));
        }
        Ok(())
    }

    pub fn axes(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        if self.arch.is_some() {
            v.push("arch");
        }
        if self.loss.is_some() {
            v.push("loss");
        }
        if self.fraction.is_some() {
            v.push("fraction");
        }
        if self.input_size.is_some() {
            v.push("input_size");
        }
        if self.augmentation.is_some() {
            v.push("augmentation");
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Fanned out to weight init, batch order, augmentation, split and
    /// subsampling.
    pub seed: u64,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub mask: MaskConfig,
    pub postprocess: PostprocessConfig,
    pub data: DataSource,
    /// Train/val/test fractions applied to untagged items.
    pub split: [f64; 3],
    /// Overrides per-annotation scale in millimetre reports.
    pub px_per_mm: Option<f64>,
    pub sweep: Option<Sweep>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelSpec::default(),
            train: TrainConfig::default(),
            mask: MaskConfig::default(),
            postprocess: PostprocessConfig::default(),
            data: DataSource::default(),
            split: [0.45, 0.05, 0.50],
            px_per_mm: None,
            sweep: None,
        }
    }
}

/// Independent stream seed for one consumer of the top-level seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_INIT: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_AUGMENT: u64 = 3;
const STREAM_SPLIT: u64 = 4;
const STREAM_SUBSAMPLE: u64 = 5;

impl ExperimentConfig {
    /// Parses JSON and resolves a manifest path relative to `base_dir`.
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: Self = serde_json::from_str(text)
            .map_err(|e| Error::InvalidConfig(format!("config: {e}")))?;
        if let DataSource::Manifest(p) = &mut cfg.data {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        Self::from_json(&text, path.parent().unwrap_or_else(|| Path::new(".")))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.mask.validate()?;
        self.postprocess.validate()?;
        if let DataSource::Manifest(p) = &self.data {
            if !p.exists() {
                return Err(invalid(format!("manifest {} does not exist", p.display())));
            }
        }
        if let DataSource::Synthetic(s) = &self.data {
            s.validate()?;
        }
        if let Some(s) = &self.sweep {
            s.validate()?;
            if let Some(f) = &s.fraction {
                if f.iter().any(|&v| !(v > 0.0 && v <= 1.0)) {
                    return Err(invalid("sweep fractions must lie in (0, 1]"));
                }
            }
        }
        if let Some(s) = self.px_per_mm {
            if !(s > 0.0) {
                return Err(invalid("px_per_mm must be positive"));
            }
        }
        Ok(())
    }

    /// Copy with every derived seed filled in from `seed`.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.model.seed = derive_seed(self.seed, STREAM_INIT);
        c.train.seed = derive_seed(self.seed, STREAM_TRAIN);
        if let Some(a) = c.train.augmentation.as_mut() {
            a.seed = derive_seed(self.seed, STREAM_AUGMENT);
        }
        c
    }

    /// Train, validation and test sets. Items tagged in a manifest keep their
    /// split; untagged items are split by `self.split`.
    pub fn load_data(&self) -> Result<(Dataset, Dataset, Dataset)> {
        let tagged = match &self.data {
            DataSource::Manifest(p) => load_manifest(p)?,
            DataSource::Synthetic(s) => generate_synthetic(s)?
                .items
                .into_iter()
                .map(|it| (None, it))
                .collect(),
        };
        let (mut train, mut val, mut test, untagged) = datasets_by_split(tagged);
        if !untagged.is_empty() {
            let [a, b, c] = self.split;
            let (tr, va, te) = split_dataset(untagged, (a, b, c), derive_seed(self.seed, STREAM_SPLIT))?;
            train.items.extend(tr.items);
            val.items.extend(va.items);
            test.items.extend(te.items);
        }
        Ok((train, val, test))
    }
}

/// Outcome of one training + evaluation.
pub struct RunOutput {
    pub checkpoint: Checkpoint,
    pub log: TrainingLog,
    pub report: Option<EvalReport>,
}

/// Trains on `train`, selects by `val`, scores on `test` when non-empty, and
/// writes checkpoint, log and report files into `out`.
pub fn run_single(
    cfg: &ExperimentConfig,
    train: &Dataset,
    val: &Dataset,
    test: &Dataset,
    out: &Path,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<RunOutput> {
    fs::create_dir_all(out)?;
    let model = Model::build(&cfg.model)?;
    let (checkpoint, log) = train_with_progress(model, train, val, &cfg.train, &cfg.mask, on_epoch)?;
    checkpoint.save(out)?;
    log.write_csv(fs::File::create(out.join("log.csv"))?)?;
    let report = if test.is_empty() {
        None
    } else {
        let r = evaluate_model(&checkpoint.model, test, &cfg.postprocess, cfg.px_per_mm)?;
        r.save(out, "eval")?;
        Some(r)
    };
    Ok(RunOutput {
        checkpoint,
        log,
        report,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: usize,
    pub arch: String,
    pub loss: String,
    pub fraction: f64,
    pub input_size: usize,
    pub augmentation: bool,
    pub n_train: usize,
    pub mean_msd_px: Option<f64>,
    pub std_msd_px: Option<f64>,
    pub median_msd_px: Option<f64>,
    pub mean_msd_mm: Option<f64>,
    pub n_failed: Option<usize>,
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
    pub train_seconds: Option<f64>,
    pub status: String,
}

struct Cell {
    arch: Arch,
    loss: LossKind,
    fraction: f64,
    input_size: usize,
    augmentation: bool,
}

fn cells(cfg: &ExperimentConfig, sweep: &Sweep) -> Vec<Cell> {
    let archs = sweep.arch.clone().unwrap_or_else(|| vec![cfg.model.arch]);
    let losses = sweep.loss.clone().unwrap_or_else(|| vec![cfg.train.loss.kind]);
    let fractions = sweep.fraction.clone().unwrap_or_else(|| vec![1.0]);
    let sizes = sweep.input_size.clone().unwrap_or_else(|| vec![cfg.model.input_size]);
    let augs = sweep
        .augmentation
        .clone()
        .unwrap_or_else(|| vec![cfg.train.augmentation.is_some()]);
    let mut out = Vec::new();
    for &arch in &archs {
        for &loss in &losses {
            for &fraction in &fractions {
                for &input_size in &sizes {
                    for &augmentation in &augs {
                        out.push(Cell {
                            arch,
                            loss,
                            fraction,
                            input_size,
                            augmentation,
                        });
                    }
                }
            }
        }
    }
    out
}

fn cell_config(base: &ExperimentConfig, cell: &Cell) -> ExperimentConfig {
    let mut c = base.clone();
    c.model.arch = cell.arch;
    c.model.input_size = cell.input_size;
    if c.train.loss.kind != cell.loss {
        c.train.loss = LossConfig {
            kind: cell.loss,
            w_pos: None,
            w_neg: None,
            ..c.train.loss
        };
    }
    c.train.augmentation = match (cell.augmentation, &base.train.augmentation) {
        (false, _) => None,
        (true, Some(a)) => Some(a.clone()),
        (true, None) => Some(AugmentationConfig::default()),
    };
    c.resolved()
}

/// Runs every sweep cell, writing `results.csv`, one `plot_<axis>.svg` per
/// swept axis and per-cell artefacts under `cells/`. A failing cell is
/// recorded with its error and the sweep moves on.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    out: &Path,
    mut progress: impl FnMut(&str),
) -> Result<Vec<CellResult>> {
    cfg.validate()?;
    let sweep = cfg
        .sweep
        .clone()
        .ok_or_else(|| invalid("experiment config has no sweep"))?;
    fs::create_dir_all(out)?;
    let (train, val, test) = cfg.load_data()?;
    if train.is_empty() || val.is_empty() || test.is_empty() {
        return Err(invalid(format!(
            "sweep needs non-empty train/val/test, got {}/{}/{}",
            train.len(),
            val.len(),
            test.len()
        )));
    }
    let mut results = Vec::new();
    let all = cells(cfg, &sweep);
    for (i, cell) in all.iter().enumerate() {
        let c = cell_config(cfg, cell);
        progress(&format!(
            "cell {}/{}: arch={} loss={} fraction={} input_size={} augmentation={}",
            i + 1,
            all.len(),
            cell.arch.as_str(),
            cell.loss.as_str(),
            cell.fraction,
            cell.input_size,
            cell.augmentation
        ));
        let mut row = CellResult {
            cell: i,
            arch: cell.arch.as_str().into(),
            loss: cell.loss.as_str().into(),
            fraction: cell.fraction,
            input_size: cell.input_size,
            augmentation: cell.augmentation,
            n_train: 0,
            mean_msd_px: None,
            std_msd_px: None,
            median_msd_px: None,
            mean_msd_mm: None,
            n_failed: None,
            best_epoch: None,
            best_val_loss: None,
            train_seconds: None,
            status: "ok".into(),
        };
        let outcome = subsample_training(&train, cell.fraction, derive_seed(cfg.seed, STREAM_SUBSAMPLE))
            .and_then(|sub| {
                row.n_train = sub.len();
                run_single(&c, &sub, &val, &test, &out.join("cells").join(i.to_string()), |_| {})
            });
        match outcome {
            Ok(run) => {
                if let Some(meta) = &run.checkpoint.training_meta {
                    row.best_epoch = Some(meta.best_epoch);
                    row.best_val_loss = Some(meta.best_val_loss);
                }
                row.train_seconds = Some(run.log.epochs.iter().map(|e| e.seconds).sum());
                if let Some(r) = &run.report {
                    row.n_failed = Some(r.n_failed);
                    if let Some(a) = r.aggregate_px {
                        row.mean_msd_px = Some(a.mean);
                        row.std_msd_px = Some(a.std);
                        row.median_msd_px = Some(a.median);
                    }
                    row.mean_msd_mm = r.aggregate_mm.map(|a| a.mean);
                }
            }
            Err(e) => row.status = format!("error: {e}"),
        }
        progress(&format!("  -> {}", row.status));
        results.push(row);
        write_results(&out.join("results.csv"), &results)?;
    }
    for axis in sweep.axes() {
        fs::write(out.join(format!("plot_{axis}.svg")), axis_plot(axis, &results).to_svg())?;
    }
    Ok(results)
}

pub fn write_results(path: &Path, rows: &[CellResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn axis_value(axis: &str, r: &CellResult) -> String {
    match axis {
        "arch" => r.arch.clone(),
        "loss" => r.loss.clone(),
        "fraction" => r.fraction.to_string(),
        "input_size" => r.input_size.to_string(),
        _ => r.augmentation.to_string(),
    }
}

/// Mean MSD against one axis, one series per combination of the others.
fn axis_plot(axis: &str, rows: &[CellResult]) -> LinePlot {
    let numeric = matches!(axis, "fraction" | "input_size");
    let mut categories: Vec<String> = Vec::new();
    for r in rows {
        let v = axis_value(axis, r);
        if !categories.contains(&v) {
            categories.push(v);
        }
    }
    let others: Vec<&str> = ["arch", "loss", "fraction", "input_size", "augmentation"]
        .into_iter()
        .filter(|&a| a != axis)
        .collect();
    let mut series: Vec<Series> = Vec::new();
    for r in rows {
        let Some(mean) = r.mean_msd_px else { continue };
        let name = others
            .iter()
            .map(|a| format!("{a}={}", axis_value(a, r)))
            .collect::<Vec<_>>()
            .join(" ");
        let x = if numeric {
            match axis {
                "fraction" => r.fraction,
                _ => r.input_size as f64,
            }
        } else {
            categories.iter().position(|c| *c == axis_value(axis, r)).unwrap_or(0) as f64
        };
        let point = (x, mean, r.std_msd_px.unwrap_or(0.0));
        match series.iter_mut().find(|s| s.name == name) {
            Some(s) => s.points.push(point),
            None => series.push(Series {
                name,
                points: vec![point],
            }),
        }
    }
    LinePlot {
        title: format!("Mean MSD by {axis}"),
        x_label: axis.into(),
        y_label: "mean MSD (px)".into(),
        categories: (!numeric).then_some(categories),
        series,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty_json() {
        let c = ExperimentConfig::from_json("{}", Path::new(".")).unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.train.loss.lambda, 5.0);
        let c = ExperimentConfig::from_json(
            r#"{"data": {"manifest": "d/manifest.json"}, "train": {"loss": {"kind": "compound"}}}"#,
            Path::new("/base"),
        )
        .unwrap();
        assert_eq!(c.data, DataSource::Manifest(PathBuf::from("/base/d/manifest.json")));
        assert_eq!(c.train.loss.lambda, 5.0);
        assert!(ExperimentConfig::from_json(r#"{"train": {"epochs": "x"}}"#, Path::new(".")).is_err());
    }

    #[test]
    fn seeds_fan_out_deterministically() {
        let mut c = ExperimentConfig::default();
        c.seed = 3;
        c.train.augmentation = Some(AugmentationConfig::default());
        let a = c.resolved();
        let b = c.resolved();
        assert_eq!(a, b);
        assert_ne!(a.model.seed, a.train.seed);
        assert_ne!(a.train.seed, a.train.augmentation.unwrap().seed);
    }

    #[test]
    fn sweep_product_and_validation() {
        let mut c = ExperimentConfig::default();
        let sweep = Sweep {
            loss: Some(vec![LossKind::Dice, LossKind::WeightedCe, LossKind::Compound]),
            input_size: Some(vec![32, 64]),
            ..Sweep::default()
        };
        assert_eq!(cells(&c, &sweep).len(), 6);
        assert_eq!(sweep.axes(), vec!["loss", "input_size"]);
        c.sweep = Some(Sweep {
            fraction: Some(vec![]),
            ..Sweep::default()
        });
        assert!(c.validate().is_err());
    }

    #[test]
    fn cell_config_resets_weights_on_loss_change() {
        let mut base = ExperimentConfig::default();
        base.train.loss = LossConfig {
            kind: LossKind::WeightedCe,
            w_pos: Some(3.0),
            w_neg: Some(0.5),
            ..LossConfig::default()
        };
        let cell = Cell {
            arch: Arch::Unet,
            loss: LossKind::Dice,
            fraction: 1.0,
            input_size: 64,
            augmentation: true,
        };
        let c = cell_config(&base, &cell);
        assert_eq!(c.train.loss.kind, LossKind::Dice);
        assert_eq!(c.train.loss.w_pos, None);
        assert_eq!(c.model.input_size, 64);
        assert!(c.train.augmentation.is_some());
    }
}

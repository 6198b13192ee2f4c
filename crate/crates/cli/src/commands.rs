use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use image::{Rgb, RgbImage};
use tongue_core::contour::{read_annotations, write_annotation, Contour, Heatmap};
use tongue_core::data::{generate_synthetic, split_dataset, write_dataset, Split, SyntheticConfig};
use tongue_core::experiment::{run_experiment, run_single, ExperimentConfig};
use tongue_core::metrics::EvalReport;
use tongue_core::models::Checkpoint;
use tongue_core::pipeline::{default_threads, parallel_map, predict_contour};
use tongue_core::plot::histogram_svg;
use tongue_core::postprocess::PostprocessConfig;
use tongue_core::Error;

use crate::{PostprocessFlags, TrainOverrides};

pub struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn input(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    pub fn exit(&self) -> ExitCode {
        eprintln!("error: {}", self.message);
        ExitCode::from(self.code)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Diverged(_) => 3,
            Error::InvalidConfig(_)
            | Error::Io(_)
            | Error::Parse(_)
            | Error::Json(_)
            | Error::Csv(_)
            | Error::Image(_)
            | Error::Checkpoint(_)
            | Error::EmptyDataset
            | Error::ShapeMismatch(_) => 2,
            _ => 1,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult = Result<(), CliError>;

/// Only CPU execution exists; `TONGUE_DEVICE` may name it explicitly.
pub fn check_device() -> CliResult {
    match std::env::var("TONGUE_DEVICE") {
        Ok(d) if !d.eq_ignore_ascii_case("cpu") => Err(CliError::input(format!(
            "TONGUE_DEVICE={d} is not available; this build runs on cpu only"
        ))),
        _ => Ok(()),
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    Ok(ExperimentConfig::load(path)?)
}

fn apply_overrides(cfg: &mut ExperimentConfig, o: &TrainOverrides) -> Result<(), CliError> {
    if let Some(v) = o.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = o.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = o.learning_rate {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = o.seed {
        cfg.seed = v;
    }
    if let Some(v) = &o.arch {
        cfg.model.arch = v.parse()?;
    }
    if let Some(v) = &o.loss {
        let kind = v.parse()?;
        if kind != cfg.train.loss.kind {
            cfg.train.loss.kind = kind;
            cfg.train.loss.w_pos = None;
            cfg.train.loss.w_neg = None;
        }
    }
    if let Some(v) = o.input_size {
        cfg.model.input_size = v;
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> CliResult {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    fs::write(path, text).map_err(Error::from)?;
    Ok(())
}

pub fn train(config: &Path, out: &Path, overrides: &TrainOverrides) -> CliResult {
    let mut cfg = load_config(config)?;
    apply_overrides(&mut cfg, overrides)?;
    let cfg = cfg.resolved();
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| CliError::input(format!("{}: {e}", out.display())))?;
    write_json(&out.join("config.json"), &cfg)?;

    let (train, val, test) = cfg.load_data()?;
    eprintln!(
        "train {} / val {} / test {} frames, {} at {}px, {} epochs",
        train.len(),
        val.len(),
        test.len(),
        cfg.model.arch.as_str(),
        cfg.model.input_size,
        cfg.train.epochs
    );
    let run = run_single(&cfg, &train, &val, &test, out, |r| {
        eprintln!(
            "epoch {:>3}  train {:.6}  val {:.6}  {:.1}s",
            r.epoch, r.train_loss, r.val_loss, r.seconds
        );
    })?;
    if let Some(meta) = &run.checkpoint.training_meta {
        println!("best epoch {} (val loss {:.6})", meta.best_epoch, meta.best_val_loss);
    }
    if let Some(agg) = run.report.as_ref().and_then(|r| r.aggregate_px) {
        println!("test MSD {:.3} px (std {:.3})", agg.mean, agg.std);
    }
    Ok(())
}

fn postprocess_config(base: PostprocessConfig, f: &PostprocessFlags) -> Result<PostprocessConfig, CliError> {
    let mut c = base;
    if let Some(v) = f.threshold {
        c.threshold = v;
    }
    if f.smoothing.is_some() {
        c.spline_smoothing = f.smoothing;
    }
    if let Some(v) = f.n_points {
        c.n_points = v;
    }
    if let Some(v) = &f.component_policy {
        c.component_policy = v.parse()?;
    }
    c.validate()?;
    Ok(c)
}

fn png_frames(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::input(format!("{}: {e}", dir.display())))?;
    let mut frames: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    frames.sort();
    if frames.is_empty() {
        return Err(CliError::input(format!("no PNG frames in {}", dir.display())));
    }
    Ok(frames)
}

fn overlay(frame: &Heatmap, contour: &Contour) -> RgbImage {
    let mut img = RgbImage::from_fn(frame.width() as u32, frame.height() as u32, |x, y| {
        let v = (frame.get(x as usize, y as usize) * 255.0).round() as u8;
        Rgb([v, v, v])
    });
    for p in &contour.points {
        let (x, y) = (p.x.round() as i64, p.y.round() as i64);
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, Rgb([255, 40, 40]));
        }
    }
    img
}

pub fn extract(
    checkpoint: &Path,
    input: &Path,
    out: &Path,
    flags: &PostprocessFlags,
    with_overlay: bool,
    threads: Option<usize>,
) -> CliResult {
    let ck = Checkpoint::load(checkpoint).map_err(|e| CliError::input(e.to_string()))?;
    let cfg = postprocess_config(PostprocessConfig::default(), flags)?;
    let frames = png_frames(input)?;
    fs::create_dir_all(out).map_err(|e| CliError::input(format!("{}: {e}", out.display())))?;
    if with_overlay {
        fs::create_dir_all(out.join("overlays")).map_err(Error::from)?;
    }

    let start = Instant::now();
    let results = parallel_map(frames.len(), threads.unwrap_or_else(default_threads), |i| {
        let path = &frames[i];
        let id = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        let t0 = Instant::now();
        let outcome = Heatmap::load_png(path).and_then(|frame| {
            let fitted = predict_contour(&ck.model, &frame, &id, &cfg)?;
            write_annotation(&out.join(format!("{id}.csv")), &fitted.contour)?;
            if with_overlay {
                overlay(&frame, &fitted.contour)
                    .save(out.join("overlays").join(format!("{id}.png")))
                    .map_err(Error::from)?;
            }
            Ok(())
        });
        (id, outcome, t0.elapsed().as_secs_f64())
    });
    let elapsed = start.elapsed().as_secs_f64();

    let mut failures = csv::Writer::from_path(out.join("failures.csv")).map_err(Error::from)?;
    failures.write_record(["frame_id", "reason"]).map_err(Error::from)?;
    let mut ok = 0;
    let mut latencies = Vec::new();
    for (id, outcome, secs) in &results {
        latencies.push(*secs);
        match outcome {
            Ok(()) => ok += 1,
            Err(e) => {
                eprintln!("{id}: {e}");
                failures.write_record([id.as_str(), &e.to_string()]).map_err(Error::from)?;
            }
        }
    }
    failures.flush().map_err(Error::from)?;
    latencies.sort_by(f64::total_cmp);
    println!(
        "extracted {ok}/{} frames in {elapsed:.2}s ({:.2} frames/s, median latency {:.1} ms)",
        frames.len(),
        frames.len() as f64 / elapsed.max(1e-9),
        latencies[latencies.len() / 2] * 1e3
    );
    Ok(())
}

/// Every annotation file in `dir`, keyed by frame id.
fn read_contour_dir(dir: &Path) -> Result<HashMap<String, Contour>, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::input(format!("{}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension().is_some_and(|x| x == "csv" || x == "json")
                && p.file_name().is_some_and(|n| n != "failures.csv")
        })
        .collect();
    paths.sort();
    let mut out = HashMap::new();
    for p in paths {
        let contours = read_annotations(&p).map_err(|e| CliError::input(format!("{}: {e}", p.display())))?;
        for c in contours {
            out.insert(c.frame_id.clone(), c);
        }
    }
    Ok(out)
}

pub fn eval(pred: &Path, gold: &Path, out: &Path, px_per_mm: Option<f64>, plot: bool) -> CliResult {
    if let Some(s) = px_per_mm {
        if !(s > 0.0) {
            return Err(CliError::input("--px-per-mm must be positive"));
        }
    }
    let predicted = read_contour_dir(pred)?;
    let gold_map = read_contour_dir(gold)?;
    if !gold_map.keys().any(|k| predicted.contains_key(k)) {
        return Err(CliError::input("predicted and gold directories share no frame ids"));
    }
    let mut truth: Vec<Contour> = gold_map.into_values().collect();
    truth.sort_by(|a, b| a.frame_id.cmp(&b.frame_id));
    let report = EvalReport::evaluate(&truth, &predicted, px_per_mm)?;
    report.save(out, "eval")?;
    if plot {
        let values: Vec<f64> = report.per_frame.iter().map(|f| f.msd_px).collect();
        fs::write(out.join("eval_hist.svg"), histogram_svg("Per-frame MSD", "MSD (px)", &values, 20))
            .map_err(Error::from)?;
    }
    if let (Some(px), Some(mm)) = (report.aggregate_px, report.aggregate_mm) {
        println!(
            "MSD {:.3} px (std {:.3}) = {:.3} mm (std {:.3}) over {} frames, {} failed",
            px.mean, px.std, mm.mean, mm.std, px.count, report.n_failed
        );
    }
    Ok(())
}

pub fn experiment(config: &Path, out: &Path) -> CliResult {
    let cfg = load_config(config)?.resolved();
    cfg.validate()?;
    if cfg.sweep.is_none() {
        return Err(CliError::input("experiment config needs a sweep section"));
    }
    fs::create_dir_all(out).map_err(|e| CliError::input(format!("{}: {e}", out.display())))?;
    write_json(&out.join("config.json"), &cfg)?;
    let rows = run_experiment(&cfg, out, |m| eprintln!("{m}"))?;
    let failed = rows.iter().filter(|r| r.status != "ok").count();
    println!("{} cells, {failed} failed; results in {}", rows.len(), out.join("results.csv").display());
    Ok(())
}

pub fn synth(
    out: &Path,
    n_frames: usize,
    image_size: usize,
    noise: f64,
    distractors: usize,
    seed: u64,
    split: Option<Vec<f64>>,
) -> CliResult {
    let cfg = SyntheticConfig {
        n_frames,
        image_size,
        noise,
        distractor_edges: distractors,
        seed,
        ..SyntheticConfig::default()
    };
    cfg.validate()?;
    let data = generate_synthetic(&cfg)?;
    fs::create_dir_all(out).map_err(|e| CliError::input(format!("{}: {e}", out.display())))?;
    let tagged: Vec<(Option<Split>, _)> = match split {
        Some(f) => {
            if f.len() != 3 {
                return Err(CliError::input(format!("--split needs 3 fractions, got {}", f.len())));
            }
            let (tr, va, te) = split_dataset(data.items, (f[0], f[1], f[2]), seed)?;
            let mut v: Vec<(Option<Split>, _)> = Vec::new();
            for d in [tr, va, te] {
                v.extend(d.items.into_iter().map(|it| (d.split, it)));
            }
            v.sort_by(|a, b| a.1.id().cmp(b.1.id()));
            v
        }
        None => data.items.into_iter().map(|it| (None, it)).collect(),
    };
    let refs: Vec<_> = tagged.iter().map(|(s, it)| (*s, it)).collect();
    let manifest = write_dataset(out, &refs).map_err(|e| CliError::input(e.to_string()))?;
    write_json(&out.join("synth_config.json"), &cfg)?;
    println!("wrote {} frames and {}", tagged.len(), manifest.display());
    Ok(())
}

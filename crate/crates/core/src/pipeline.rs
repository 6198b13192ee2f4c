//! Frame → contour inference and dataset scoring.
//!
//! `Model::infer` takes `&self` and touches no shared mutable state, so one
//! loaded model may serve several threads at once.

use std::collections::HashMap;

use crate::contour::Heatmap;
use crate::data::{rescale_contour, resize_frame, Dataset};
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::models::{predict_heatmap, Model};
use crate::postprocess::{extract_contour, FittedContour, PostprocessConfig};

/// Heatmap at network resolution for a frame of any size.
pub fn frame_heatmap(model: &Model, frame: &Heatmap) -> Result<Heatmap> {
    let s = model.spec().input_size;
    predict_heatmap(model, &resize_frame(frame, s, s)?)
}

/// Predicted contour in the frame's own pixel coordinates.
pub fn predict_contour(model: &Model, frame: &Heatmap, frame_id: &str, cfg: &PostprocessConfig) -> Result<FittedContour> {
    let s = model.spec().input_size;
    let heat = frame_heatmap(model, frame)?;
    let mut fitted = extract_contour(&heat, cfg)?;
    fitted.contour = rescale_contour(&fitted.contour, (s, s), (frame.width(), frame.height()));
    fitted.contour.frame_id = frame_id.to_string();
    Ok(fitted)
}

/// Runs `f` over `0..n` on up to `threads` workers, preserving index order.
pub fn parallel_map<T: Send>(n: usize, threads: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return (0..n).map(f).collect();
    }
    let mut slots: Vec<Option<T>> = (0..n).map(|_| None).collect();
    let chunk = n.div_ceil(threads);
    std::thread::scope(|scope| {
        for (c, part) in slots.chunks_mut(chunk).enumerate() {
            let f = &f;
            scope.spawn(move || {
                for (j, slot) in part.iter_mut().enumerate() {
                    *slot = Some(f(c * chunk + j));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("every slot filled")).collect()
}

pub fn default_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Predicts every item and scores it against its annotation. Frames without a
/// detected contour count as failures; any other error aborts.
pub fn evaluate_model(model: &Model, dataset: &Dataset, cfg: &PostprocessConfig, px_per_mm: Option<f64>) -> Result<EvalReport> {
    let results = parallel_map(dataset.len(), default_threads(), |i| {
        let it = &dataset.items[i];
        predict_contour(model, &it.frame, it.id(), cfg)
    });
    let mut predicted = HashMap::new();
    for (it, r) in dataset.items.iter().zip(results) {
        match r {
            Ok(f) => {
                predicted.insert(it.id().to_string(), f.contour);
            }
            Err(Error::NoContour) => {}
            Err(e) => return Err(e),
        }
    }
    let truth: Vec<_> = dataset.items.iter().map(|it| it.contour.clone()).collect();
    EvalReport::evaluate(&truth, &predicted, px_per_mm)
}

//! Mean sum of distances between contours, and the reports built on it.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::contour::{px_to_mm, Contour};
use crate::error::{invalid, Error, Result};

/// Symmetric mean nearest-point distance:
/// (Σ_v min_u ‖v−u‖ + Σ_u min_v ‖u−v‖) / (|U| + |V|).
pub fn msd(u: &Contour, v: &Contour) -> Result<f64> {
    if u.is_empty() || v.is_empty() {
        return Err(Error::EmptyContour);
    }
    let directed = |a: &Contour, b: &Contour| -> f64 {
        a.points
            .iter()
            .map(|p| {
                b.points
                    .iter()
                    .map(|q| p.dist(q))
                    .fold(f64::INFINITY, f64::min)
            })
            .sum()
    };
    Ok((directed(v, u) + directed(u, v)) / (u.len() + v.len()) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub median: f64,
    pub max: f64,
}

pub fn summarize(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(invalid("cannot summarize an empty list"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(invalid("cannot summarize non-finite values"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    };
    Ok(Summary {
        count: values.len(),
        mean,
        std: var.sqrt(),
        median,
        max: sorted[sorted.len() - 1],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameScore {
    pub frame_id: String,
    pub msd_px: f64,
    pub msd_mm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_frame: Vec<FrameScore>,
    /// Over successful frames only; `None` when every frame failed.
    pub aggregate_px: Option<Summary>,
    pub aggregate_mm: Option<Summary>,
    pub n_failed: usize,
    pub failed_frames: Vec<String>,
}

#[derive(Serialize)]
struct ReportJson<'a> {
    aggregate_px: &'a Option<Summary>,
    aggregate_mm: &'a Option<Summary>,
    n_frames: usize,
    n_failed: usize,
    failed_frames: &'a [String],
    failure_policy: &'static str,
}

impl EvalReport {
    /// Scores every ground-truth frame. A frame with no prediction counts as
    /// failed and stays out of the aggregates. `px_per_mm` overrides the
    /// per-contour scale.
    pub fn evaluate(
        truth: &[Contour],
        predicted: &HashMap<String, Contour>,
        px_per_mm: Option<f64>,
    ) -> Result<Self> {
        if truth.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut per_frame = Vec::new();
        let mut failed_frames = Vec::new();
        for gt in truth {
            match predicted.get(&gt.frame_id) {
                Some(pred) => {
                    let px = msd(pred, gt)?;
                    let scale = px_per_mm.unwrap_or_else(|| gt.scale());
                    per_frame.push(FrameScore {
                        frame_id: gt.frame_id.clone(),
                        msd_px: px,
                        msd_mm: px_to_mm(px, scale)?,
                    });
                }
                None => failed_frames.push(gt.frame_id.clone()),
            }
        }
        let px: Vec<f64> = per_frame.iter().map(|f| f.msd_px).collect();
        let mm: Vec<f64> = per_frame.iter().map(|f| f.msd_mm).collect();
        Ok(Self {
            aggregate_px: summarize(&px).ok(),
            aggregate_mm: summarize(&mm).ok(),
            n_failed: failed_frames.len(),
            failed_frames,
            per_frame,
        })
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for f in &self.per_frame {
            w.serialize(f)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ReportJson {
            aggregate_px: &self.aggregate_px,
            aggregate_mm: &self.aggregate_mm,
            n_frames: self.per_frame.len() + self.n_failed,
            n_failed: self.n_failed,
            failed_frames: &self.failed_frames,
            failure_policy: "frames without a detected contour are excluded from aggregates",
        })?)
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.write_csv(std::fs::File::create(dir.join(format!("{stem}.csv")))?)?;
        std::fs::write(dir.join(format!("{stem}.json")), self.to_json()?)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgreementMatrix {
    pub annotators: Vec<String>,
    /// `cells[a][b]` = (mean, std) of per-frame msd.
    pub cells: Vec<Vec<(f64, f64)>>,
}

/// Pairwise inter-annotator agreement over a shared frame set.
pub fn agreement_matrix(annotations: &BTreeMap<String, Vec<Contour>>) -> Result<AgreementMatrix> {
    let annotators: Vec<String> = annotations.keys().cloned().collect();
    let by_frame: Vec<BTreeMap<&str, &Contour>> = annotations
        .values()
        .map(|cs| cs.iter().map(|c| (c.frame_id.as_str(), c)).collect())
        .collect();
    if let Some(first) = by_frame.first() {
        if first.is_empty() {
            return Err(Error::EmptyDataset);
        }
        for (name, frames) in annotators.iter().zip(&by_frame) {
            if frames.len() != first.len() || frames.keys().ne(first.keys()) {
                return Err(invalid(format!(
                    "annotator '{name}' covers a different frame set than '{}'",
                    annotators[0]
                )));
            }
        }
    }
    let k = annotators.len();
    let mut cells = vec![vec![(0.0, 0.0); k]; k];
    for a in 0..k {
        for b in a + 1..k {
            let scores = by_frame[a]
                .iter()
                .map(|(id, ca)| msd(ca, by_frame[b][id]))
                .collect::<Result<Vec<f64>>>()?;
            let s = summarize(&scores)?;
            cells[a][b] = (s.mean, s.std);
            cells[b][a] = (s.mean, s.std);
        }
    }
    Ok(AgreementMatrix { annotators, cells })
}

//! Heatmap → contour: threshold, thin, order by column, smooth, resample.

mod skeleton;
pub mod spline;

use std::collections::VecDeque;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::contour::{Contour, Heatmap, Point, CANONICAL_POINTS};
use crate::error::{invalid, Error, Result};

pub use skeleton::skeletonize;
pub use spline::SmoothingSpline;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryImage {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl BinaryImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    /// Builds from row-major rows of equal length.
    pub fn from_rows(rows: &[&[u8]]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != width) {
            return Err(invalid("ragged binary image rows"));
        }
        let data = rows.iter().flat_map(|r| r.iter().map(|&v| v != 0)).collect();
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    /// Foreground coordinates in raster order.
    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v)
            .map(move |(i, _)| (i % self.width, i / self.width))
    }

    pub fn is_subset_of(&self, other: &BinaryImage) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComponentPolicy {
    #[default]
    Largest,
    All,
}

impl FromStr for ComponentPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "largest" => Ok(Self::Largest),
            "all" => Ok(Self::All),
            other => Err(invalid(format!("unknown component policy '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PostprocessConfig {
    pub threshold: f32,
    /// Residual budget for the smoothing spline; `None` uses the number of
    /// ordered skeleton points.
    pub spline_smoothing: Option<f64>,
    pub n_points: usize,
    pub component_policy: ComponentPolicy,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            spline_smoothing: None,
            n_points: CANONICAL_POINTS,
            component_policy: ComponentPolicy::Largest,
        }
    }
}

impl PostprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(invalid(format!(
                "threshold must lie in (0, 1), got {}",
                self.threshold
            )));
        }
        if let Some(s) = self.spline_smoothing {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(invalid(format!("spline smoothing must be >= 0, got {s}")));
            }
        }
        if self.n_points < 2 {
            return Err(invalid("n_points must be at least 2"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMethod {
    SmoothingSpline,
    /// Too few distinct columns for a cubic; linear interpolation was used.
    LinearFallback,
}

#[derive(Clone, Debug)]
pub struct FittedContour {
    pub contour: Contour,
    pub method: FitMethod,
}

/// Foreground iff value ≥ threshold.
pub fn binarize(heatmap: &Heatmap, threshold: f32) -> BinaryImage {
    BinaryImage {
        width: heatmap.width(),
        height: heatmap.height(),
        data: heatmap.values().iter().map(|&v| v >= threshold).collect(),
    }
}

/// One point per occupied column at the mean row of the selected pixels,
/// sorted by x.
pub fn order_skeleton(skeleton: &BinaryImage, policy: ComponentPolicy) -> Result<Contour> {
    if skeleton.count() < 2 {
        return Err(Error::NoContour);
    }
    let selected: Vec<(usize, usize)> = match policy {
        ComponentPolicy::All => skeleton.pixels().collect(),
        ComponentPolicy::Largest => largest_component(skeleton),
    };
    if selected.len() < 2 {
        return Err(Error::NoContour);
    }
    let mut sums = vec![(0.0f64, 0usize); skeleton.width];
    for &(x, y) in &selected {
        sums[x].0 += y as f64;
        sums[x].1 += 1;
    }
    let points: Vec<Point> = sums
        .iter()
        .enumerate()
        .filter(|(_, s)| s.1 > 0)
        .map(|(x, s)| Point::new(x as f64, s.0 / s.1 as f64))
        .collect();
    Contour::new("", points)
}

/// Largest 8-connected component; ties go to the one met first in raster order.
fn largest_component(img: &BinaryImage) -> Vec<(usize, usize)> {
    let (w, h) = (img.width, img.height);
    let mut seen = vec![false; w * h];
    let mut best: Vec<(usize, usize)> = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if !img.data[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        seen[start] = true;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (x, y) = (i % w, i / w);
            comp.push((x, y));
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if img.data[j] && !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        if comp.len() > best.len() {
            best = comp;
        }
    }
    best
}

/// Smooths y(x) and samples `n_points` abscissae evenly over the x range.
/// Points sharing an x are averaged first.
pub fn fit_contour(points: &Contour, cfg: &PostprocessConfig) -> Result<FittedContour> {
    cfg.validate()?;
    let mut pts: Vec<Point> = points.points.clone();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x));
    let mut xs: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    for p in &pts {
        match xs.last() {
            Some(&lx) if lx == p.x => {
                *ys.last_mut().unwrap() += p.y;
                *counts.last_mut().unwrap() += 1;
            }
            _ => {
                xs.push(p.x);
                ys.push(p.y);
                counts.push(1);
            }
        }
    }
    for (y, c) in ys.iter_mut().zip(&counts) {
        *y /= *c as f64;
    }
    if xs.len() < 2 {
        return Err(Error::NoContour);
    }
    let (x0, x1) = (xs[0], xs[xs.len() - 1]);
    let n = cfg.n_points;
    let grid = (0..n).map(|i| x0 + (x1 - x0) * i as f64 / (n - 1) as f64);

    let (sampled, method): (Vec<Point>, FitMethod) = if xs.len() >= 4 {
        let s = cfg.spline_smoothing.unwrap_or(xs.len() as f64);
        let spline = SmoothingSpline::fit(&xs, &ys, s)?;
        (
            grid.map(|x| Point::new(x, spline.eval(x))).collect(),
            FitMethod::SmoothingSpline,
        )
    } else {
        (
            grid.map(|x| Point::new(x, interp_linear(&xs, &ys, x))).collect(),
            FitMethod::LinearFallback,
        )
    };
    Ok(FittedContour {
        contour: Contour::new(points.frame_id.clone(), sampled)?,
        method,
    })
}

fn interp_linear(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let k = xs.partition_point(|&v| v <= x).clamp(1, xs.len() - 1) - 1;
    let t = ((x - xs[k]) / (xs[k + 1] - xs[k])).clamp(0.0, 1.0);
    ys[k] + t * (ys[k + 1] - ys[k])
}

/// binarize → skeletonize → order_skeleton → fit_contour, clamped to the frame.
pub fn extract_contour(heatmap: &Heatmap, cfg: &PostprocessConfig) -> Result<FittedContour> {
    cfg.validate()?;
    let skeleton = skeletonize(&binarize(heatmap, cfg.threshold));
    let ordered = order_skeleton(&skeleton, cfg.component_policy)?;
    let mut fitted = fit_contour(&ordered, cfg)?;
    fitted
        .contour
        .clamp_to(heatmap.width(), heatmap.height());
    Ok(fitted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contour::{contour_to_mask, MaskConfig};

    fn bar(w: usize, h: usize, x0: usize, y0: usize, bw: usize, bh: usize) -> BinaryImage {
        let mut b = BinaryImage::new(w, h);
        for y in y0..y0 + bh {
            for x in x0..x0 + bw {
                b.set(x, y, true);
            }
        }
        b
    }

    #[test]
    fn binarize_uses_inclusive_threshold() {
        assert_eq!(binarize(&Heatmap::filled(4, 3, 0.4).unwrap(), 0.5).count(), 0);
        assert_eq!(binarize(&Heatmap::filled(4, 3, 0.6).unwrap(), 0.5).count(), 12);
        assert_eq!(binarize(&Heatmap::filled(4, 3, 0.5).unwrap(), 0.5).count(), 12);
    }

    #[test]
    fn skeleton_trivial_fixpoints() {
        let empty = BinaryImage::new(8, 8);
        assert_eq!(skeletonize(&empty), empty);
        let mut dot = BinaryImage::new(8, 8);
        dot.set(3, 4, true);
        assert_eq!(skeletonize(&dot), dot);
    }

    #[test]
    fn bar_thins_to_a_horizontal_line() {
        let b = bar(16, 9, 3, 3, 10, 3);
        let s = skeletonize(&b);
        assert!(s.is_subset_of(&b));
        let rows: Vec<usize> = s.pixels().map(|(_, y)| y).collect();
        assert!(rows.iter().all(|&y| y == 4), "{rows:?}");
        let xs: Vec<usize> = s.pixels().map(|(x, _)| x).collect();
        // Interior columns survive contiguously.
        assert!(xs.len() >= 6);
        assert!(xs.windows(2).all(|w| w[1] == w[0] + 1));
        assert!(*xs.first().unwrap() >= 3 && *xs.last().unwrap() <= 12);
    }

    #[test]
    fn order_horizontal_line_is_identity() {
        let b = bar(20, 5, 2, 2, 12, 1);
        let c = order_skeleton(&b, ComponentPolicy::Largest).unwrap();
        assert_eq!(c.len(), 12);
        for (i, p) in c.points.iter().enumerate() {
            assert_eq!((p.x, p.y), ((i + 2) as f64, 2.0));
        }
    }

    #[test]
    fn order_keeps_largest_component() {
        let mut b = bar(80, 10, 0, 2, 50, 1);
        for x in 60..65 {
            b.set(x, 7, true);
        }
        let largest = order_skeleton(&b, ComponentPolicy::Largest).unwrap();
        assert_eq!(largest.len(), 50);
        assert!(largest.points.iter().all(|p| p.x < 50.0));
        let all = order_skeleton(&b, ComponentPolicy::All).unwrap();
        assert_eq!(all.len(), 55);
    }

    #[test]
    fn order_averages_rows_in_a_column() {
        let mut b = BinaryImage::new(5, 15);
        b.set(2, 10, true);
        b.set(2, 12, true);
        let c = order_skeleton(&b, ComponentPolicy::All).unwrap();
        assert_eq!(c.points[0].y, 11.0);
    }

    #[test]
    fn order_needs_two_pixels() {
        let mut b = BinaryImage::new(5, 5);
        assert!(matches!(
            order_skeleton(&b, ComponentPolicy::Largest),
            Err(Error::NoContour)
        ));
        b.set(1, 1, true);
        assert!(matches!(
            order_skeleton(&b, ComponentPolicy::Largest),
            Err(Error::NoContour)
        ));
    }

    #[test]
    fn fit_on_line_and_fallback() {
        let line = Contour::from_xy("", &(0..30).map(|i| (i as f64, 2.0 * i as f64 + 1.0)).collect::<Vec<_>>()).unwrap();
        let f = fit_contour(&line, &PostprocessConfig::default()).unwrap();
        assert_eq!(f.method, FitMethod::SmoothingSpline);
        assert_eq!(f.contour.len(), 100);
        for p in &f.contour.points {
            assert!((p.y - (2.0 * p.x + 1.0)).abs() < 1e-6);
        }
        let few = Contour::from_xy("", &[(0.0, 0.0), (1.0, 2.0), (3.0, 2.0)]).unwrap();
        let f = fit_contour(&few, &PostprocessConfig::default()).unwrap();
        assert_eq!(f.method, FitMethod::LinearFallback);
        assert_eq!(f.contour.len(), 100);
        assert!((f.contour.points[99].y - 2.0).abs() < 1e-12);
    }

    #[test]
    fn fit_interpolates_with_zero_smoothing() {
        let pts = [(0.0, 1.0), (2.0, 5.0), (4.0, 2.0), (6.0, 3.0), (8.0, 0.0)];
        let c = Contour::from_xy("", &pts).unwrap();
        let cfg = PostprocessConfig {
            spline_smoothing: Some(0.0),
            n_points: 5,
            ..Default::default()
        };
        let f = fit_contour(&c, &cfg).unwrap();
        for (p, q) in f.contour.points.iter().zip(pts) {
            assert!((p.x - q.0).abs() < 1e-12 && (p.y - q.1).abs() < 1e-9);
        }
    }

    #[test]
    fn all_zero_heatmap_has_no_contour() {
        let r = extract_contour(&Heatmap::zeros(64, 64), &PostprocessConfig::default());
        assert!(matches!(r, Err(Error::NoContour)));
    }

    #[test]
    fn horizontal_line_round_trip() {
        let line = Contour::from_xy("", &(10..=118).map(|x| (x as f64, 64.0)).collect::<Vec<_>>()).unwrap();
        let mask = contour_to_mask(&line, &MaskConfig::default(), 128, 128).unwrap();
        let f = extract_contour(&mask, &PostprocessConfig::default()).unwrap();
        assert_eq!(f.contour.len(), 100);
        assert!(f.contour.points.iter().all(|p| (p.y - 64.0).abs() <= 1.0));
        assert!(f.contour.is_x_monotone());
    }

    #[test]
    fn config_validation() {
        let bad = PostprocessConfig {
            threshold: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = PostprocessConfig {
            n_points: 1,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!("all".parse::<ComponentPolicy>().unwrap(), ComponentPolicy::All);
    }
}

//! Contour geometry and Gaussian heatmap masks.
//!
//! A [`Contour`] is an ordered list of image-space points tracing the tongue
//! surface. Pixel centres sit at integer coordinates; contour coordinates may
//! be fractional. A [`Heatmap`] is a dense single-channel grid with values in
//! `[0, 1]`, used both for ground-truth masks and for network outputs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Canonical number of points per annotated contour.
pub const CANONICAL_POINTS: usize = 100;

/// Conventional scale of the reference recordings: 1 px is about 0.25 mm.
pub const DEFAULT_PX_PER_MM: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(&self, other: &Point) -> f64 {
        let (dx, dy) = (self.x - other.x, self.y - other.y);
        (dx * dx + dy * dy).sqrt()
    }
}

impl From<(f64, f64)> for Point {
    fn from((x, y): (f64, f64)) -> Self {
        Self { x, y }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Contour {
    pub frame_id: String,
    pub points: Vec<Point>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub px_per_mm: Option<f64>,
}

impl Contour {
    /// Builds a contour, rejecting empty point lists and non-finite coordinates.
    pub fn new(frame_id: impl Into<String>, points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyContour);
        }
        if let Some(i) = points
            .iter()
            .position(|p| !p.x.is_finite() || !p.y.is_finite())
        {
            return Err(Error::NonFinite(i));
        }
        Ok(Self {
            frame_id: frame_id.into(),
            points,
            px_per_mm: None,
        })
    }

    pub fn from_xy(frame_id: impl Into<String>, xy: &[(f64, f64)]) -> Result<Self> {
        Self::new(frame_id, xy.iter().copied().map(Point::from).collect())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Scale used for millimetre reporting, falling back to 4 px/mm.
    pub fn scale(&self) -> f64 {
        self.px_per_mm.unwrap_or(DEFAULT_PX_PER_MM)
    }

    /// Stable sort by x, so a traced surface reads as a function y(x).
    pub fn canonicalize(&mut self) {
        self.points.sort_by(|a, b| a.x.total_cmp(&b.x));
    }

    pub fn is_x_monotone(&self) -> bool {
        self.points.windows(2).all(|w| w[0].x <= w[1].x)
    }

    /// Clamps every point into `[0, width-1] x [0, height-1]`.
    pub fn clamp_to(&mut self, width: usize, height: usize) {
        let (xmax, ymax) = (width.saturating_sub(1) as f64, height.saturating_sub(1) as f64);
        for p in &mut self.points {
            p.x = p.x.clamp(0.0, xmax);
            p.y = p.y.clamp(0.0, ymax);
        }
    }

    pub fn arc_length(&self) -> f64 {
        self.points.windows(2).map(|w| w[0].dist(&w[1])).sum()
    }

    /// Multiplies coordinates independently along each axis.
    pub fn scaled(&self, sx: f64, sy: f64) -> Contour {
        let mut out = self.clone();
        for p in &mut out.points {
            p.x *= sx;
            p.y *= sy;
        }
        out
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Contour {
        let mut out = self.clone();
        for p in &mut out.points {
            p.x += dx;
            p.y += dy;
        }
        out
    }
}

/// Single-channel probability grid, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    width: usize,
    height: usize,
    values: Vec<f32>,
}

impl Heatmap {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
        }
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Result<Self> {
        Self::from_values(width, height, vec![value; width * height])
    }

    /// Wraps raw values, checking the length and that every entry lies in `[0, 1]`.
    pub fn from_values(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(invalid("heatmap dimensions must be positive"));
        }
        if values.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {width}x{height} heatmap",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(invalid(format!("heatmap value {v} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.values[y * self.width + x] = v.clamp(0.0, 1.0);
    }

    pub fn max(&self) -> f32 {
        self.values.iter().copied().fold(f32::MIN, f32::max)
    }

    pub fn min(&self) -> f32 {
        self.values.iter().copied().fold(f32::MAX, f32::min)
    }

    pub fn count_nonzero(&self) -> usize {
        self.values.iter().filter(|&&v| v > 0.0).count()
    }

    /// 8-bit grayscale, value = round(255 * I).
    pub fn to_gray(&self) -> image::GrayImage {
        let bytes = self
            .values
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        image::GrayImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer length matches dimensions")
    }

    pub fn from_gray(img: &image::GrayImage) -> Self {
        let values = img.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            values,
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_gray().save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        Ok(Self::from_gray(&image::open(path)?.to_luma8()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskConfig {
    /// Gaussian spread in pixels.
    pub sigma: f64,
    /// Values strictly below this are zeroed after normalisation.
    pub floor_threshold: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            sigma: 4.0,
            floor_threshold: 0.4,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(invalid(format!("mask sigma must be > 0, got {}", self.sigma)));
        }
        if !(0.0..1.0).contains(&self.floor_threshold) {
            return Err(invalid(format!(
                "mask floor threshold must be in [0, 1), got {}",
                self.floor_threshold
            )));
        }
        Ok(())
    }
}

/// Renders a contour as a sum of isotropic Gaussians, one per point.
///
/// The summed field is divided by its maximum so the peak is exactly 1, then
/// values below `cfg.floor_threshold` are zeroed. Surviving values are left
/// as they are.
pub fn contour_to_mask(
    contour: &Contour,
    cfg: &MaskConfig,
    width: usize,
    height: usize,
) -> Result<Heatmap> {
    cfg.validate()?;
    if width == 0 || height == 0 {
        return Err(invalid("mask dimensions must be positive"));
    }
    if contour.points.is_empty() {
        return Err(Error::EmptyContour);
    }
    if let Some(i) = contour
        .points
        .iter()
        .position(|p| !p.x.is_finite() || !p.y.is_finite())
    {
        return Err(Error::NonFinite(i));
    }

    // The kernel is separable: exp(-(dx²+dy²)/2σ²) = exp(-dx²/2σ²)·exp(-dy²/2σ²).
    let denom = 2.0 * cfg.sigma * cfg.sigma;
    let mut field = vec![0.0f64; width * height];
    let mut ex = vec![0.0f64; width];
    let mut ey = vec![0.0f64; height];
    for p in &contour.points {
        for (x, e) in ex.iter_mut().enumerate() {
            let d = x as f64 - p.x;
            *e = (-d * d / denom).exp();
        }
        for (y, e) in ey.iter_mut().enumerate() {
            let d = y as f64 - p.y;
            *e = (-d * d / denom).exp();
        }
        for (row, &eyv) in field.chunks_exact_mut(width).zip(&ey) {
            if eyv == 0.0 {
                continue;
            }
            for (f, &exv) in row.iter_mut().zip(&ex) {
                *f += eyv * exv;
            }
        }
    }

    let peak = field.iter().copied().fold(0.0f64, f64::max);
    let values = if peak > 0.0 {
        field
            .into_iter()
            .map(|v| {
                let n = v / peak;
                if n < cfg.floor_threshold {
                    0.0
                } else {
                    n as f32
                }
            })
            .collect()
    } else {
        // Every point lies so far off-grid that the field underflowed.
        vec![0.0; width * height]
    };
    Ok(Heatmap {
        width,
        height,
        values,
    })
}

/// Resamples to `n_out` points equally spaced by arc length along the
/// piecewise-linear trace. Endpoints are preserved exactly.
pub fn resample_contour(contour: &Contour, n_out: usize) -> Result<Contour> {
    if n_out < 2 {
        return Err(invalid(format!("resample needs n_out >= 2, got {n_out}")));
    }
    let pts = &contour.points;
    if pts.is_empty() {
        return Err(Error::EmptyContour);
    }
    let mut cum = Vec::with_capacity(pts.len());
    cum.push(0.0);
    for w in pts.windows(2) {
        let last = *cum.last().unwrap();
        cum.push(last + w[0].dist(&w[1]));
    }
    let total = *cum.last().unwrap();
    if !(total > 0.0) {
        return Err(Error::DegenerateContour);
    }

    let mut out = Vec::with_capacity(n_out);
    out.push(pts[0]);
    let mut seg = 0;
    for k in 1..n_out - 1 {
        let target = total * k as f64 / (n_out - 1) as f64;
        while seg + 1 < pts.len() - 1 && cum[seg + 1] < target {
            seg += 1;
        }
        let span = cum[seg + 1] - cum[seg];
        let t = if span > 0.0 {
            (target - cum[seg]) / span
        } else {
            0.0
        };
        let (a, b) = (pts[seg], pts[seg + 1]);
        out.push(Point::new(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y)));
    }
    out.push(*pts.last().unwrap());

    Ok(Contour {
        frame_id: contour.frame_id.clone(),
        points: out,
        px_per_mm: contour.px_per_mm,
    })
}

/// Converts a pixel distance to millimetres given a scale in px/mm.
pub fn px_to_mm(distance_px: f64, px_per_mm: f64) -> Result<f64> {
    if !(px_per_mm > 0.0 && px_per_mm.is_finite()) {
        return Err(invalid(format!("px_per_mm must be > 0, got {px_per_mm}")));
    }
    Ok(distance_px / px_per_mm)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum JsonAnnotation {
    Record {
        frame_id: String,
        points: Vec<[f64; 2]>,
        #[serde(default)]
        px_per_mm: Option<f64>,
    },
    Bare(Vec<[f64; 2]>),
}

#[derive(Serialize)]
struct JsonRecord<'a> {
    frame_id: &'a str,
    points: Vec<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    px_per_mm: Option<f64>,
}

/// Reads an annotation file. `.json` holds either `{"frame_id", "points"}` or a
/// bare array of `[x, y]` pairs; anything else is parsed as CSV with a
/// `frame_id` column followed by `x0,y0,x1,y1,...`. A bare JSON array takes
/// its frame id from the file stem.
pub fn read_annotations(path: &Path) -> Result<Vec<Contour>> {
    let is_json = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_json {
        let text = fs::read_to_string(path)?;
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let parsed: JsonAnnotation = serde_json::from_str(&text)?;
        let (id, pairs, scale) = match parsed {
            JsonAnnotation::Record {
                frame_id,
                points,
                px_per_mm,
            } => (frame_id, points, px_per_mm),
            JsonAnnotation::Bare(points) => (stem, points, None),
        };
        let pts = pairs.into_iter().map(|[x, y]| Point::new(x, y)).collect();
        let mut c = Contour::new(id, pts)?;
        c.px_per_mm = scale;
        return Ok(vec![c]);
    }
    read_annotations_csv(fs::File::open(path)?)
}

pub fn read_annotations_csv<R: std::io::Read>(reader: R) -> Result<Vec<Contour>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let has_id = headers.get(0).is_some_and(|h| h.trim() == "frame_id");
    let first = usize::from(has_id);
    if (headers.len() - first) % 2 != 0 {
        return Err(Error::Parse(format!(
            "expected x/y column pairs, found {} coordinate columns",
            headers.len() - first
        )));
    }
    let mut out = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let id = if has_id {
            rec[0].to_string()
        } else {
            format!("{row}")
        };
        let nums = rec
            .iter()
            .skip(first)
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("row {row}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let pts = nums.chunks_exact(2).map(|c| Point::new(c[0], c[1])).collect();
        out.push(Contour::new(id, pts)?);
    }
    Ok(out)
}

/// Writes contours as CSV records `frame_id,x0,y0,...`. All contours must have
/// the same point count.
pub fn write_annotations_csv<W: std::io::Write>(writer: W, contours: &[Contour]) -> Result<()> {
    let n = contours.first().map_or(0, Contour::len);
    if contours.iter().any(|c| c.len() != n) {
        return Err(Error::ShapeMismatch(
            "all contours in one CSV must share a point count".into(),
        ));
    }
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["frame_id".to_string()];
    for i in 0..n {
        header.push(format!("x{i}"));
        header.push(format!("y{i}"));
    }
    w.write_record(&header)?;
    for c in contours {
        let mut rec = vec![c.frame_id.clone()];
        for p in &c.points {
            rec.push(format!("{}", p.x));
            rec.push(format!("{}", p.y));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes one contour, choosing JSON or CSV from the extension.
pub fn write_annotation(path: &Path, contour: &Contour) -> Result<()> {
    let is_json = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_json {
        let rec = JsonRecord {
            frame_id: &contour.frame_id,
            points: contour.points.iter().map(|p| [p.x, p.y]).collect(),
            px_per_mm: contour.px_per_mm,
        };
        fs::write(path, serde_json::to_string(&rec)?)?;
        Ok(())
    } else {
        write_annotations_csv(fs::File::create(path)?, std::slice::from_ref(contour))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(x: f64, y: f64) -> Contour {
        Contour::from_xy("p", &[(x, y)]).unwrap()
    }

    #[test]
    fn single_point_mask_values() {
        let m = contour_to_mask(&single(64.0, 64.0), &MaskConfig::default(), 128, 128).unwrap();
        assert_eq!(m.get(64, 64), 1.0);
        let expected = (-16.0f64 / 32.0).exp() as f32;
        assert!((m.get(64, 68) - expected).abs() < 1e-6);
        assert!((m.get(64, 68) - 0.6065).abs() < 1e-4);
        // exp(-36/32) = 0.3247 falls under the 0.4 floor.
        assert_eq!(m.get(64, 70), 0.0);
    }

    #[test]
    fn mask_rejects_bad_input() {
        let empty = Contour {
            frame_id: "e".into(),
            points: vec![],
            px_per_mm: None,
        };
        assert!(matches!(
            contour_to_mask(&empty, &MaskConfig::default(), 8, 8),
            Err(Error::EmptyContour)
        ));
        let nan = Contour {
            frame_id: "n".into(),
            points: vec![Point::new(1.0, f64::NAN)],
            px_per_mm: None,
        };
        assert!(matches!(
            contour_to_mask(&nan, &MaskConfig::default(), 8, 8),
            Err(Error::NonFinite(0))
        ));
        assert!(contour_to_mask(&single(1.0, 1.0), &MaskConfig::default(), 0, 8).is_err());
        let bad = MaskConfig {
            sigma: 0.0,
            ..Default::default()
        };
        assert!(contour_to_mask(&single(1.0, 1.0), &bad, 8, 8).is_err());
    }

    #[test]
    fn resample_straight_segment() {
        let c = Contour::from_xy("s", &[(0.0, 0.0), (10.0, 0.0)]).unwrap();
        let r = resample_contour(&c, 3).unwrap();
        assert_eq!(
            r.points,
            vec![Point::new(0.0, 0.0), Point::new(5.0, 0.0), Point::new(10.0, 0.0)]
        );
    }

    #[test]
    fn resample_uniform_identity() {
        let xy: Vec<(f64, f64)> = (0..7).map(|i| (i as f64 * 1.5, 2.0 * i as f64)).collect();
        let c = Contour::from_xy("u", &xy).unwrap();
        let r = resample_contour(&c, 7).unwrap();
        for (a, b) in r.points.iter().zip(&c.points) {
            assert!(a.dist(b) < 1e-9);
        }
    }

    #[test]
    fn resample_quarter_circle_against_fine_table() {
        // Arc-length oracle: tabulate 1e5 subdivisions and invert numerically.
        let radius = 10.0;
        let n_sub = 100_000;
        let dense: Vec<(f64, f64)> = (0..=n_sub)
            .map(|i| {
                let t = std::f64::consts::FRAC_PI_2 * i as f64 / n_sub as f64;
                (radius * t.cos(), radius * t.sin())
            })
            .collect();
        let mut cum = vec![0.0];
        for w in dense.windows(2) {
            let d = (w[1].0 - w[0].0).hypot(w[1].1 - w[0].1);
            cum.push(cum.last().unwrap() + d);
        }
        let total = *cum.last().unwrap();
        let expected: Vec<(f64, f64)> = (0..5)
            .map(|k| {
                let target = total * k as f64 / 4.0;
                let idx = cum.partition_point(|&c| c < target).min(n_sub);
                dense[idx]
            })
            .collect();
        // Angles 0, 22.5, 45, 67.5, 90 degrees.
        for (k, e) in expected.iter().enumerate() {
            let ang = (22.5 * k as f64).to_radians();
            assert!((e.0 - radius * ang.cos()).hypot(e.1 - radius * ang.sin()) < 0.01);
        }

        let c = Contour::from_xy("q", &dense).unwrap();
        let r = resample_contour(&c, 5).unwrap();
        for (p, e) in r.points.iter().zip(&expected) {
            assert!((p.x - e.0).hypot(p.y - e.1) < 0.1);
        }
    }

    #[test]
    fn resample_degenerate() {
        let c = Contour::from_xy("d", &[(3.0, 3.0), (3.0, 3.0), (3.0, 3.0)]).unwrap();
        assert!(matches!(resample_contour(&c, 10), Err(Error::DegenerateContour)));
        assert!(resample_contour(&c, 1).is_err());
    }

    #[test]
    fn px_to_mm_conversions() {
        assert_eq!(px_to_mm(4.0, 4.0).unwrap(), 1.0);
        assert!((px_to_mm(3.42, 4.0).unwrap() - 0.855).abs() < 1e-12);
        assert_eq!(px_to_mm(0.0, 4.0).unwrap(), 0.0);
        assert!(px_to_mm(1.0, 0.0).is_err());
        assert!(px_to_mm(1.0, -2.0).is_err());
    }

    #[test]
    fn canonicalize_is_stable_by_x() {
        let mut c =
            Contour::from_xy("c", &[(3.0, 0.0), (1.0, 1.0), (3.0, 2.0), (0.0, 3.0)]).unwrap();
        c.canonicalize();
        let got: Vec<_> = c.points.iter().map(|p| (p.x, p.y)).collect();
        assert_eq!(got, vec![(0.0, 3.0), (1.0, 1.0), (3.0, 0.0), (3.0, 2.0)]);
        assert!(c.is_x_monotone());
    }

    #[test]
    fn annotation_csv_and_json_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let c = Contour::from_xy("f7", &[(1.25, 2.5), (3.0, 4.0), (5.5, 6.0)]).unwrap();
        let csv_path = dir.path().join("f7.csv");
        write_annotation(&csv_path, &c).unwrap();
        assert_eq!(read_annotations(&csv_path).unwrap(), vec![c.clone()]);
        let json_path = dir.path().join("f7.json");
        write_annotation(&json_path, &c).unwrap();
        assert_eq!(read_annotations(&json_path).unwrap(), vec![c.clone()]);

        let bare = dir.path().join("frame9.json");
        fs::write(&bare, "[[1.0, 2.0], [3.0, 4.0]]").unwrap();
        let got = read_annotations(&bare).unwrap();
        assert_eq!(got[0].frame_id, "frame9");
        assert_eq!(got[0].points[1], Point::new(3.0, 4.0));
    }

    #[test]
    fn heatmap_png_quantisation() {
        let dir = tempfile::tempdir().unwrap();
        let h = Heatmap::from_values(2, 1, vec![0.5, 1.0]).unwrap();
        let path = dir.path().join("m.png");
        h.save_png(&path).unwrap();
        let raw = image::open(&path).unwrap().to_luma8();
        assert_eq!(raw.as_raw(), &vec![128u8, 255]);
        assert!(Heatmap::from_values(1, 1, vec![1.5]).is_err());
    }
}

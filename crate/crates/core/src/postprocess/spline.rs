//! Cubic smoothing spline with a residual budget.
//!
//! Among all twice-differentiable y(x), find the one minimising ∫ y''² subject
//! to Σ (yᵢ − y(xᵢ))² ≤ s. The minimiser is a natural cubic spline with knots
//! at the data abscissae; it is found by solving the penalised problem
//! Σ (yᵢ − gᵢ)² + α ∫ g''² for the α at which the residual equals `s`.
//! `s = 0` interpolates; a budget at least the straight-line residual returns
//! the least-squares line.

use crate::error::{invalid, Result};

#[derive(Clone, Debug)]
pub struct SmoothingSpline {
    x: Vec<f64>,
    /// Fitted values at the knots.
    g: Vec<f64>,
    /// Second derivatives at the knots (zero at both ends).
    gamma: Vec<f64>,
    residual: f64,
}

impl SmoothingSpline {
    /// `x` must be strictly increasing with at least three entries.
    pub fn fit(x: &[f64], y: &[f64], s: f64) -> Result<Self> {
        let n = x.len();
        if n != y.len() {
            return Err(invalid("spline x and y lengths differ"));
        }
        if n < 3 {
            return Err(invalid("smoothing spline needs at least 3 points"));
        }
        if x.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(invalid("spline abscissae must be strictly increasing"));
        }
        if !(s >= 0.0) {
            return Err(invalid(format!("smoothing factor must be >= 0, got {s}")));
        }
        let sys = System::new(x);

        if s == 0.0 {
            let (g, gamma) = sys.solve(y, 0.0);
            return Ok(Self::from_parts(x, y, g, gamma));
        }
        let (line_g, line_rss) = least_squares_line(x, y);
        if line_rss <= s {
            let gamma = vec![0.0; n];
            return Ok(Self {
                x: x.to_vec(),
                g: line_g,
                gamma,
                residual: line_rss,
            });
        }

        // RSS(α) rises monotonically from 0 towards the line residual.
        let rss = |alpha: f64| {
            let (g, _) = sys.solve(y, alpha);
            g.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
        };
        let mut lo = 1.0f64;
        let mut hi = 1.0f64;
        while rss(lo) > s && lo > 1e-300 {
            lo *= 1e-3;
        }
        while rss(hi) < s && hi < 1e300 {
            hi *= 1e3;
        }
        let (mut llo, mut lhi) = (lo.ln(), hi.ln());
        for _ in 0..200 {
            let mid = 0.5 * (llo + lhi);
            let r = rss(mid.exp());
            if (r - s).abs() <= 1e-10 * s {
                llo = mid;
                lhi = mid;
                break;
            }
            if r < s {
                llo = mid;
            } else {
                lhi = mid;
            }
        }
        let alpha = (0.5 * (llo + lhi)).exp();
        let (g, gamma) = sys.solve(y, alpha);
        Ok(Self::from_parts(x, y, g, gamma))
    }

    fn from_parts(x: &[f64], y: &[f64], g: Vec<f64>, gamma: Vec<f64>) -> Self {
        let residual = g.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
        Self {
            x: x.to_vec(),
            g,
            gamma,
            residual,
        }
    }

    /// Σ (yᵢ − g(xᵢ))² achieved by the fit.
    pub fn residual(&self) -> f64 {
        self.residual
    }

    /// Evaluates the spline; outside the knot range it extends linearly.
    pub fn eval(&self, t: f64) -> f64 {
        let n = self.x.len();
        if t <= self.x[0] {
            let slope = self.end_slope(0);
            return self.g[0] + slope * (t - self.x[0]);
        }
        if t >= self.x[n - 1] {
            let slope = self.end_slope(n - 2);
            return self.g[n - 1] + slope * (t - self.x[n - 1]);
        }
        let k = self.x.partition_point(|&v| v <= t).saturating_sub(1).min(n - 2);
        self.eval_segment(k, t)
    }

    fn eval_segment(&self, k: usize, t: f64) -> f64 {
        let (xl, xr) = (self.x[k], self.x[k + 1]);
        let h = xr - xl;
        let (dl, dr) = (t - xl, xr - t);
        (dl * self.g[k + 1] + dr * self.g[k]) / h
            - dl * dr / 6.0 * ((1.0 + dl / h) * self.gamma[k + 1] + (1.0 + dr / h) * self.gamma[k])
    }

    fn end_slope(&self, k: usize) -> f64 {
        let h = self.x[k + 1] - self.x[k];
        let secant = (self.g[k + 1] - self.g[k]) / h;
        if k == 0 {
            secant - h / 6.0 * (2.0 * self.gamma[0] + self.gamma[1])
        } else {
            secant + h / 6.0 * (self.gamma[k] + 2.0 * self.gamma[k + 1])
        }
    }
}

/// Banded pieces of the penalised normal equations.
struct System {
    h: Vec<f64>,
    /// Rows of the pentadiagonal QᵀQ: (diag, first off-diagonal, second).
    qtq: Vec<[f64; 3]>,
    /// Tridiagonal R: (diag, off-diagonal).
    r: Vec<[f64; 2]>,
}

impl System {
    fn new(x: &[f64]) -> Self {
        let n = x.len();
        let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
        let m = n - 2;
        // Column j of Q (interior knot j+1) has entries at rows j, j+1, j+2.
        let col = |j: usize| -> [f64; 3] {
            [1.0 / h[j], -1.0 / h[j] - 1.0 / h[j + 1], 1.0 / h[j + 1]]
        };
        let mut qtq = vec![[0.0; 3]; m];
        let mut r = vec![[0.0; 2]; m];
        for j in 0..m {
            let cj = col(j);
            qtq[j][0] = cj.iter().map(|v| v * v).sum();
            if j + 1 < m {
                let c1 = col(j + 1);
                qtq[j][1] = cj[1] * c1[0] + cj[2] * c1[1];
            }
            if j + 2 < m {
                let c2 = col(j + 2);
                qtq[j][2] = cj[2] * c2[0];
            }
            r[j][0] = (h[j] + h[j + 1]) / 3.0;
            if j + 1 < m {
                r[j][1] = h[j + 1] / 6.0;
            }
        }
        Self { h, qtq, r }
    }

    /// Returns fitted values g and knot second derivatives for penalty α.
    fn solve(&self, y: &[f64], alpha: f64) -> (Vec<f64>, Vec<f64>) {
        let n = y.len();
        let m = n - 2;
        let h = &self.h;
        let rhs: Vec<f64> = (0..m)
            .map(|j| (y[j + 2] - y[j + 1]) / h[j + 1] - (y[j + 1] - y[j]) / h[j])
            .collect();
        let bands: Vec<[f64; 3]> = (0..m)
            .map(|j| {
                [
                    self.r[j][0] + alpha * self.qtq[j][0],
                    self.r[j][1] + alpha * self.qtq[j][1],
                    alpha * self.qtq[j][2],
                ]
            })
            .collect();
        let inner = solve_pentadiagonal(&bands, &rhs);

        let mut gamma = vec![0.0; n];
        gamma[1..n - 1].copy_from_slice(&inner);
        // g = y − α·Q·γ
        let mut g = y.to_vec();
        if alpha > 0.0 {
            for (j, &c) in inner.iter().enumerate() {
                g[j] -= alpha * c / h[j];
                g[j + 1] -= alpha * c * (-1.0 / h[j] - 1.0 / h[j + 1]);
                g[j + 2] -= alpha * c / h[j + 1];
            }
        }
        (g, gamma)
    }
}

/// LDLᵀ solve of a symmetric positive-definite pentadiagonal system given as
/// rows of (diag, first super-diagonal, second super-diagonal).
fn solve_pentadiagonal(bands: &[[f64; 3]], rhs: &[f64]) -> Vec<f64> {
    let m = bands.len();
    let mut d = vec![0.0; m];
    let mut l1 = vec![0.0; m];
    let mut l2 = vec![0.0; m];
    for i in 0..m {
        let mut di = bands[i][0];
        if i >= 1 {
            di -= l1[i - 1] * l1[i - 1] * d[i - 1];
        }
        if i >= 2 {
            di -= l2[i - 2] * l2[i - 2] * d[i - 2];
        }
        d[i] = di;
        if i + 1 < m {
            let mut e = bands[i][1];
            if i >= 1 {
                e -= l1[i - 1] * l2[i - 1] * d[i - 1];
            }
            l1[i] = e / di;
        }
        if i + 2 < m {
            l2[i] = bands[i][2] / di;
        }
    }
    let mut z = rhs.to_vec();
    for i in 0..m {
        if i >= 1 {
            z[i] -= l1[i - 1] * z[i - 1];
        }
        if i >= 2 {
            z[i] -= l2[i - 2] * z[i - 2];
        }
    }
    for i in 0..m {
        z[i] /= d[i];
    }
    for i in (0..m).rev() {
        if i + 1 < m {
            z[i] -= l1[i] * z[i + 1];
        }
        if i + 2 < m {
            z[i] -= l2[i] * z[i + 2];
        }
    }
    z
}

fn least_squares_line(x: &[f64], y: &[f64]) -> (Vec<f64>, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let g: Vec<f64> = x.iter().map(|v| my + slope * (v - mx)).collect();
    let rss = g.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    (g, rss)
}

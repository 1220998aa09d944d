//! Preprocessing of raw inertial windows.
//!
//! Pipeline per channel-axis series: 3-point moving average, 4th-order
//! Butterworth high-pass at 2 Hz, flatten `[T][C][A] -> [T][C*A]`
//! (channel-major, axis-minor), then per-feature z-score over time.

use crate::error::{Error, Result};
use num_complex::Complex64;
use std::f64::consts::PI;

/// Division guard for z-scoring constant series.
pub const ZSCORE_EPS: f64 = 1e-8;

/// One raw recording window: `t_len` time steps of `channels x axes`
/// inertial values, time-major then channel-major then axis order.
///
/// Values are stored as `f32` — the container dtype — and widened to `f64`
/// for all signal math.
#[derive(Debug, Clone, PartialEq)]
pub struct RawWindow {
    pub values: Vec<f32>,
    pub t_len: usize,
    pub channels: usize,
    pub axes: usize,
    pub sample_rate_hz: f64,
}

impl RawWindow {
    pub fn new(
        values: Vec<f32>,
        t_len: usize,
        channels: usize,
        axes: usize,
        sample_rate_hz: f64,
    ) -> Result<Self> {
        if t_len < 8 {
            return Err(Error::invalid(format!("window length {t_len} < 8")));
        }
        if channels == 0 || axes == 0 {
            return Err(Error::invalid("channels and axes must be >= 1"));
        }
        if values.len() != t_len * channels * axes {
            return Err(Error::invalid(format!(
                "value buffer has {} entries, expected {}x{}x{}",
                values.len(),
                t_len,
                channels,
                axes
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("raw window contains non-finite values"));
        }
        Ok(Self {
            values,
            t_len,
            channels,
            axes,
            sample_rate_hz,
        })
    }

    #[inline]
    pub fn at(&self, t: usize, c: usize, a: usize) -> f32 {
        self.values[(t * self.channels + c) * self.axes + a]
    }

    /// Copies one channel-axis series as `f64`.
    pub fn series(&self, c: usize, a: usize) -> Vec<f64> {
        (0..self.t_len).map(|t| self.at(t, c, a) as f64).collect()
    }

    /// Returns a window containing only the selected channels and axes,
    /// preserving their relative order.
    pub fn restrict(&self, channels: &[usize], axes: &[usize]) -> Result<Self> {
        if channels.is_empty() || axes.is_empty() {
            return Err(Error::invalid("channel/axis subset must be non-empty"));
        }
        for &c in channels {
            if c >= self.channels {
                return Err(Error::invalid(format!("channel index {c} out of range")));
            }
        }
        for &a in axes {
            if a >= self.axes {
                return Err(Error::invalid(format!("axis index {a} out of range")));
            }
        }
        let mut values = Vec::with_capacity(self.t_len * channels.len() * axes.len());
        for t in 0..self.t_len {
            for &c in channels {
                for &a in axes {
                    values.push(self.at(t, c, a));
                }
            }
        }
        RawWindow::new(
            values,
            self.t_len,
            channels.len(),
            axes.len(),
            self.sample_rate_hz,
        )
    }
}

/// Preprocessed feature matrix `[t_len][dim]`, z-scored per column.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub values: Vec<f64>,
    pub t_len: usize,
    pub dim: usize,
    /// Provenance id of the sample this sequence was derived from.
    pub source: u64,
}

impl FeatureSequence {
    #[inline]
    pub fn at(&self, t: usize, d: usize) -> f64 {
        self.values[t * self.dim + d]
    }

    pub fn column(&self, d: usize) -> Vec<f64> {
        (0..self.t_len).map(|t| self.at(t, d)).collect()
    }
}

/// Moving average with a clipped (shrinking) window at the edges.
/// `k` must be odd and >= 1; output length equals input length.
pub fn moving_average(x: &[f64], k: usize) -> Result<Vec<f64>> {
    if k < 1 || k % 2 == 0 {
        return Err(Error::invalid(format!(
            "moving average window {k} must be odd and >= 1"
        )));
    }
    if x.is_empty() {
        return Err(Error::invalid("moving average input is empty"));
    }
    let half = (k - 1) / 2;
    let n = x.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let lo = i.saturating_sub(half);
        let hi = (i + half).min(n - 1);
        let sum: f64 = x[lo..=hi].iter().sum();
        out.push(sum / (hi - lo + 1) as f64);
    }
    Ok(out)
}

/// One second-order section with `a0` normalized to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl Biquad {
    /// Complex frequency response at normalized angular frequency
    /// `omega` (radians per sample).
    pub fn response(&self, omega: f64) -> Complex64 {
        let z1 = Complex64::from_polar(1.0, -omega);
        let z2 = Complex64::from_polar(1.0, -2.0 * omega);
        (self.b0 + self.b1 * z1 + self.b2 * z2) / (1.0 + self.a1 * z1 + self.a2 * z2)
    }
}

/// Designs a digital Butterworth high-pass as cascaded biquads via the
/// bilinear transform with frequency prewarping at `cutoff_hz`.
/// `order` must be even and >= 2.
pub fn design_highpass(cutoff_hz: f64, fs_hz: f64, order: usize) -> Result<Vec<Biquad>> {
    if !(cutoff_hz > 0.0 && cutoff_hz < fs_hz / 2.0) {
        return Err(Error::invalid(format!(
            "cutoff {cutoff_hz} Hz must lie in (0, {}) for fs {fs_hz} Hz",
            fs_hz / 2.0
        )));
    }
    if order < 2 || order % 2 != 0 {
        return Err(Error::invalid(format!(
            "filter order {order} must be even and >= 2"
        )));
    }
    // Prewarped analog cutoff; bilinear constant folded to K = 1 by using
    // the tan form directly (s = (z-1)/(z+1) with omega_c = tan(pi*fc/fs)).
    let wc = (PI * cutoff_hz / fs_hz).tan();

    let n = order;
    let mut sections = Vec::with_capacity(n / 2);
    for k in 0..n / 2 {
        // Unit-circle Butterworth prototype pole pair (left half-plane).
        let theta = PI * (2.0 * k as f64 + n as f64 + 1.0) / (2.0 * n as f64);
        let pole = Complex64::new(theta.cos(), theta.sin());
        // Low-pass -> high-pass mapping s -> wc / s applied to the pair:
        // denominator s^2 + p1 s + p2 with
        let p1 = -2.0 * wc * pole.re / pole.norm_sqr();
        let p2 = wc * wc / pole.norm_sqr();
        // Bilinear transform of s^2 / (s^2 + p1 s + p2).
        let a0 = 1.0 + p1 + p2;
        sections.push(Biquad {
            b0: 1.0 / a0,
            b1: -2.0 / a0,
            b2: 1.0 / a0,
            a1: (2.0 * p2 - 2.0) / a0,
            a2: (1.0 - p1 + p2) / a0,
        });
    }
    Ok(sections)
}

/// Magnitude response of a biquad cascade at `freq_hz`.
pub fn cascade_gain(sections: &[Biquad], freq_hz: f64, fs_hz: f64) -> f64 {
    let omega = 2.0 * PI * freq_hz / fs_hz;
    sections
        .iter()
        .map(|s| s.response(omega).norm())
        .product()
}

/// Causal single-pass Butterworth high-pass filter.
///
/// Each section starts from its steady state for a constant input equal to
/// the first sample, so a constant series maps to (numerically) zero with
/// no start-of-window step transient.
pub fn butterworth_highpass(
    x: &[f64],
    cutoff_hz: f64,
    fs_hz: f64,
    order: usize,
) -> Result<Vec<f64>> {
    if x.len() < 8 {
        return Err(Error::invalid(format!(
            "highpass input length {} < 8",
            x.len()
        )));
    }
    let sections = design_highpass(cutoff_hz, fs_hz, order)?;
    let mut y = x.to_vec();
    for s in &sections {
        // Transposed direct form II. Steady-state init for input level x0:
        // output is 0 (zero DC gain), so s2 = b2*x0 and s1 = (b1+b2)*x0.
        let x0 = y[0];
        let mut s1 = (s.b1 + s.b2) * x0;
        let mut s2 = s.b2 * x0;
        for v in y.iter_mut() {
            let xin = *v;
            let out = s.b0 * xin + s1;
            s1 = s.b1 * xin - s.a1 * out + s2;
            s2 = s.b2 * xin - s.a2 * out;
            *v = out;
        }
    }
    Ok(y)
}

/// `(x - mean) / max(std, eps)` with population std.
/// Constant input yields all zeros via the eps guard.
pub fn zscore(x: &[f64]) -> Vec<f64> {
    if x.is_empty() {
        return Vec::new();
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let denom = var.sqrt().max(ZSCORE_EPS);
    x.iter().map(|v| (v - mean) / denom).collect()
}

/// Full preprocessing of a raw window. `source` is carried through as the
/// provenance id of the resulting features.
pub fn preprocess(w: &RawWindow, source: u64) -> Result<FeatureSequence> {
    let dim = w.channels * w.axes;
    let t = w.t_len;
    let mut values = vec![0.0f64; t * dim];
    for c in 0..w.channels {
        for a in 0..w.axes {
            let series = w.series(c, a);
            let smoothed = moving_average(&series, 3)?;
            let filtered = butterworth_highpass(&smoothed, 2.0, w.sample_rate_hz, 4)?;
            let normed = zscore(&filtered);
            let d = c * w.axes + a;
            for (ti, v) in normed.into_iter().enumerate() {
                values[ti * dim + d] = v;
            }
        }
    }
    Ok(FeatureSequence {
        values,
        t_len: t,
        dim,
        source,
    })
}

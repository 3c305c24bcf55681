//! Diagnostics for how quickly the forward process forgets the data:
//! QQ-against-normal pairs, Gaussian KDE, and per-timestep summaries.

use std::f64::consts::PI;
use std::thread;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::rng;
use crate::schedule::{standard_normal, NoiseSchedule};
use crate::voxel::VoxelGrid;

/// Points on the KDE evaluation grid.
pub const KDE_GRID_POINTS: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QqPlot {
    /// `(theoretical, sample)` quantile pairs.
    pub pairs: Vec<(f64, f64)>,
    /// Pearson correlation of the pairs.
    pub correlation: f64,
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
}

/// Standard-normal quantiles at plotting positions `(i − 0.5)/n`.
pub fn normal_quantiles(n: usize) -> Vec<f64> {
    let z = Normal::new(0.0, 1.0).expect("unit normal");
    (1..=n).map(|i| z.inverse_cdf((i as f64 - 0.5) / n as f64)).collect()
}

pub fn qq_points(samples: &[f64]) -> Result<QqPlot> {
    if samples.len() < 10 {
        return Err(Error::DegenerateSample(format!("need at least 10 samples, got {}", samples.len())));
    }
    if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index: i });
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted[0] == sorted[sorted.len() - 1] {
        return Err(Error::DegenerateSample("constant samples".into()));
    }
    let theory = normal_quantiles(sorted.len());
    let correlation = pearson(&theory, &sorted);
    Ok(QqPlot { pairs: theory.into_iter().zip(sorted).collect(), correlation })
}

/// Gaussian-kernel density estimate of `samples` evaluated at `grid`.
pub fn kde(samples: &[f64], bandwidth: f64, grid: &[f64]) -> Result<Vec<f64>> {
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::InvalidArgument(format!("bandwidth must be > 0, got {bandwidth}")));
    }
    if samples.is_empty() {
        return Err(Error::DegenerateSample("no samples".into()));
    }
    let norm = 1.0 / (samples.len() as f64 * bandwidth * (2.0 * PI).sqrt());
    Ok(grid
        .iter()
        .map(|&x| {
            norm * samples
                .iter()
                .map(|&s| {
                    let u = (x - s) / bandwidth;
                    (-0.5 * u * u).exp()
                })
                .sum::<f64>()
        })
        .collect())
}

fn mean_var(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var)
}

/// Silverman's rule of thumb: `0.9 · min(σ, IQR/1.34) · n^(−1/5)`.
pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let (_, var) = mean_var(samples);
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let q = |p: f64| s[((s.len() - 1) as f64 * p).round() as usize];
    let iqr = q(0.75) - q(0.25);
    let sd = var.sqrt();
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    0.9 * spread * (samples.len() as f64).powf(-0.2)
}

/// Evenly spaced grid covering the samples padded by five bandwidths.
pub fn kde_grid(samples: &[f64], bandwidth: f64, points: usize) -> Vec<f64> {
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min) - 5.0 * bandwidth;
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 5.0 * bandwidth;
    let step = (hi - lo) / (points - 1) as f64;
    (0..points).map(|i| lo + step * i as f64).collect()
}

/// Trapezoid integral of `y` over `x`.
pub fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2).zip(y.windows(2)).map(|(xs, ys)| 0.5 * (xs[1] - xs[0]) * (ys[0] + ys[1])).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimestepRecord {
    pub t: usize,
    pub qq_correlation: f64,
    pub qq: Vec<(f64, f64)>,
    pub bandwidth: f64,
    pub kde_x: Vec<f64>,
    pub kde_density: Vec<f64>,
    pub mean: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalityReport {
    pub seed: u64,
    pub records: Vec<TimestepRecord>,
}

fn record(t: usize, values: &[f64]) -> Result<TimestepRecord> {
    let qq = qq_points(values)?;
    let (mean, variance) = mean_var(values);
    let bandwidth = silverman_bandwidth(values);
    let kde_x = kde_grid(values, bandwidth, KDE_GRID_POINTS);
    let kde_density = kde(values, bandwidth, &kde_x)?;
    Ok(TimestepRecord { t, qq_correlation: qq.correlation, qq: qq.pairs, bandwidth, kde_x, kde_density, mean, variance })
}

/// Draws `x_t` from `x0` for every requested `t` and summarizes each
/// distribution. `t = 0` summarizes `x0` itself.
pub fn normality_report(x0: &VoxelGrid, sched: &NoiseSchedule, timesteps: &[usize], seed: u64) -> Result<NormalityReport> {
    for &t in timesteps {
        if t > sched.steps() {
            return Err(Error::StepOutOfRange { t, max: sched.steps() });
        }
    }
    let x: Vec<f64> = x0.values().iter().map(|&v| v as f64).collect();
    let records = thread::scope(|s| {
        let handles: Vec<_> = timesteps
            .iter()
            .map(|&t| {
                let x = &x;
                s.spawn(move || {
                    if t == 0 {
                        return record(0, x);
                    }
                    let mut r = rng::item_stream(seed, "normality", t as u64);
                    let eps = standard_normal(x.len(), &mut r);
                    record(t, &sched.forward_sample_values(x, t, &eps)?)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("analysis worker panicked")).collect::<Result<Vec<_>>>()
    })?;
    Ok(NormalityReport { seed, records })
}

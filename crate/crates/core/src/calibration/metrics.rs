//! Fit statistics of simulated against observed readings.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::statespace::MeasurementNoiseModel;

/// Sensor groups by measurement-noise variance, `[lower, upper)`.
pub const VARIANCE_BANDS: [(f64, f64); 6] = [
    (0.0, 500.0),
    (500.0, 2500.0),
    (2500.0, 5000.0),
    (5000.0, 10000.0),
    (10000.0, 20000.0),
    (20000.0, f64::INFINITY),
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ErrorMetrics {
    pub rmse: f64,
    /// Squared errors weighted by the inverse measurement variance; exact
    /// sensors are left out.
    pub wsse: f64,
    /// `sqrt(N * sum e^2) / sum y`.
    pub rmsn: f64,
    pub observations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BandMetrics {
    pub lower: f64,
    pub upper: f64,
    pub sensors: Vec<usize>,
    /// `None` when the band is empty or saw no flow.
    pub metrics: Option<ErrorMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeriesMetrics {
    pub overall: ErrorMetrics,
    pub bands: Vec<BandMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HorizonMetrics {
    /// 0 for estimation, `k` for `k`-step predictions.
    pub horizon: usize,
    pub metrics: SeriesMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub horizons: Vec<HorizonMetrics>,
}

impl MetricsReport {
    pub fn horizon(&self, k: usize) -> Option<&ErrorMetrics> {
        self.horizons.iter().find(|h| h.horizon == k).map(|h| &h.metrics.overall)
    }

    pub fn rmsn(&self, k: usize) -> Option<f64> {
        self.horizon(k).map(|m| m.rmsn)
    }
}

/// Metrics over aligned `[interval][sensor]` rows. Non-finite observations
/// count as missing.
pub fn compute_metrics(
    estimated: &[Vec<f64>],
    observed: &[Vec<f64>],
    noise: &MeasurementNoiseModel,
) -> Result<SeriesMetrics> {
    if estimated.len() != observed.len() {
        return Err(Error::dim("metric rows", observed.len(), estimated.len()));
    }
    let m = noise.len();
    for (e, o) in estimated.iter().zip(observed) {
        if e.len() != m || o.len() != m {
            return Err(Error::dim("metric columns", m, e.len().min(o.len())));
        }
    }
    let all: Vec<usize> = (0..m).collect();
    let overall = metrics_for(estimated, observed, noise, &all)?;
    let bands = VARIANCE_BANDS
        .iter()
        .map(|&(lower, upper)| {
            let sensors: Vec<usize> = (0..m)
                .filter(|&i| (lower..upper).contains(&noise.variances()[i]))
                .collect();
            let metrics = metrics_for(estimated, observed, noise, &sensors).ok();
            BandMetrics {
                lower,
                upper,
                sensors,
                metrics,
            }
        })
        .collect();
    Ok(SeriesMetrics { overall, bands })
}

fn metrics_for(
    estimated: &[Vec<f64>],
    observed: &[Vec<f64>],
    noise: &MeasurementNoiseModel,
    sensors: &[usize],
) -> Result<ErrorMetrics> {
    let (mut sse, mut wsse, mut total, mut count) = (0.0, 0.0, 0.0, 0usize);
    for (e, o) in estimated.iter().zip(observed) {
        for &i in sensors {
            if !o[i].is_finite() {
                continue;
            }
            let err = o[i] - e[i];
            sse += err * err;
            if !noise.is_exact(i) {
                wsse += err * err / noise.variances()[i];
            }
            total += o[i];
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::UndefinedMetric("no observations"));
    }
    if total <= 0.0 {
        return Err(Error::UndefinedMetric("RMSN with zero total observed flow"));
    }
    Ok(ErrorMetrics {
        rmse: (sse / count as f64).sqrt(),
        wsse,
        rmsn: (count as f64 * sse).sqrt() / total,
        observations: count,
    })
}

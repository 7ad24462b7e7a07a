//! Offline preparation: per-day bootstrap calibration, then the historical
//! profile, AR transition, process noise and measurement noise.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::model::TrafficModel;
use super::online::{run_online, CalibrationInputs, OnlineConfig};
use crate::error::{Error, Result};
use crate::gradient::{GradientMode, IncidenceMatrix};
use crate::statespace::{
    ar_aic, estimate_q, estimate_r, fit_ar_pooled, ARTransitionModel, HistoricalProfile, MeasurementNoiseModel,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepareConfig {
    /// Settings of the per-day bootstrap runs. Gradients are always FD.
    pub online: OnlineConfig,
    pub max_ar_order: usize,
    /// Coefficient of variation of the bootstrap process noise.
    pub bootstrap_cv: f64,
    /// Coefficient of variation of the bootstrap measurement noise.
    pub measurement_cv: f64,
    /// Smallest bootstrap measurement variance.
    pub measurement_floor: f64,
    /// AR orders with the best AIC that go on to the validation comparison.
    pub validation_candidates: usize,
    /// Magnitude above which a Jacobian entry counts as structural.
    pub incidence_threshold: f64,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        Self {
            online: OnlineConfig::default(),
            max_ar_order: 5,
            bootstrap_cv: 0.1,
            measurement_cv: 0.1,
            measurement_floor: 1e-6,
            validation_candidates: 3,
            incidence_threshold: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedInputs {
    pub inputs: CalibrationInputs,
    /// Order with the best AIC on the training days.
    pub aic_order: usize,
    /// Order finally chosen on the validation days.
    pub chosen_order: usize,
    /// Calibrated flows per day, training days first.
    pub calibrated: Vec<Vec<Vec<f64>>>,
    /// Jacobian patterns by lag, pooled over all bootstrap runs.
    pub incidence: Vec<IncidenceMatrix>,
}

/// Inputs for the bootstrap runs: the seed profile as history, independent
/// deviations with `(cv * mean flow)^2` variance, and `(cv * mean count)^2`
/// measurement variances.
pub fn bootstrap_inputs<M: TrafficModel>(
    model: &M,
    seed_profile: &[Vec<f64>],
    days: &[Vec<Vec<f64>>],
    cfg: &PrepareConfig,
) -> Result<CalibrationInputs> {
    let n = model.num_params();
    let m = model.num_measurements();
    let horizon = seed_profile.len();
    let measurements = model.run(&model.initial_state(), seed_profile)?;
    let historical = HistoricalProfile::new(seed_profile.to_vec(), measurements)?;
    let mean_flow: Vec<f64> = (0..n)
        .map(|j| seed_profile.iter().map(|x| x[j]).sum::<f64>() / horizon.max(1) as f64)
        .collect();
    let q = mean_flow.iter().map(|x| (cfg.bootstrap_cv * x).powi(2)).sum::<f64>() / n.max(1) as f64;
    let rows = days.iter().flatten().count().max(1) as f64;
    let mean_count: Vec<f64> = (0..m)
        .map(|i| days.iter().flatten().map(|y| y[i]).filter(|v| v.is_finite()).sum::<f64>() / rows)
        .collect();
    Ok(CalibrationInputs {
        historical,
        ar: ARTransitionModel::from_scalars(&[0.0], n, q)?,
        noise: MeasurementNoiseModel::from_cv(&mean_count, cfg.measurement_cv, cfg.measurement_floor)?,
    })
}

/// Runs the preparation pipeline on observed readings (`[day][interval][sensor]`).
pub fn prepare_inputs<M: TrafficModel>(
    model: &M,
    seed_profile: &[Vec<f64>],
    training: &[Vec<Vec<f64>>],
    validation: &[Vec<Vec<f64>>],
    cfg: &PrepareConfig,
) -> Result<PreparedInputs> {
    if training.is_empty() {
        return Err(Error::InvalidArgument("at least one training day is required".into()));
    }
    let horizon = training[0].len();
    if let Some(bad) = training.iter().chain(validation).find(|d| d.len() != horizon) {
        return Err(Error::dim("day length", horizon, bad.len()));
    }
    if seed_profile.len() < horizon {
        return Err(Error::dim("seed profile intervals", horizon, seed_profile.len()));
    }
    let all_days: Vec<Vec<Vec<f64>>> = training.iter().chain(validation).cloned().collect();
    let boot = bootstrap_inputs(model, &seed_profile[..horizon], &all_days, cfg)?;
    let mut online = cfg.online.clone();
    online.gradient = GradientMode::Fd;
    online.record_incidence = Some(cfg.incidence_threshold);

    let mut calibrated = Vec::with_capacity(all_days.len());
    let mut residuals = Vec::with_capacity(all_days.len());
    let mut incidence: Vec<IncidenceMatrix> = Vec::new();
    for (d, day) in all_days.iter().enumerate() {
        let result = run_online(model, boot.clone(), day.clone(), online.clone(), None)?;
        log::info!("bootstrap calibration of day {d} done");
        residuals.push(
            day.iter()
                .zip(&result.estimated_counts)
                .map(|(y, e)| y.iter().zip(e).map(|(a, b)| a - b).collect())
                .collect::<Vec<Vec<f64>>>(),
        );
        for (lag, pattern) in result.incidence.iter().enumerate() {
            if incidence.len() <= lag {
                incidence.push(pattern.clone());
            } else {
                incidence[lag] = incidence[lag].union(pattern)?;
            }
        }
        calibrated.push(result.estimates);
    }
    let noise = estimate_r(&residuals)?;

    let n = model.num_params();
    let flows: Vec<Vec<f64>> = (0..horizon)
        .map(|h| {
            (0..n)
                .map(|j| calibrated.iter().map(|day| day[h][j]).sum::<f64>() / calibrated.len() as f64)
                .collect()
        })
        .collect();
    let measurements = model.run(&model.initial_state(), &flows)?;
    let historical = HistoricalProfile::new(flows, measurements)?;
    let deviations: Vec<Vec<Vec<f64>>> = calibrated
        .iter()
        .map(|day| {
            day.iter()
                .zip(historical.all_flows())
                .map(|(x, h)| x.iter().zip(h).map(|(a, b)| a - b).collect())
                .collect()
        })
        .collect();
    let (train_dev, valid_dev) = deviations.split_at(training.len());
    let (aic_order, chosen_order) = choose_order(train_dev, valid_dev, cfg)?;
    let ar = fit_ar_pooled(train_dev, chosen_order)?;
    let q = estimate_q(train_dev, &ar)?;
    Ok(PreparedInputs {
        inputs: CalibrationInputs {
            historical,
            ar: ar.with_noise_variance(q),
            noise,
        },
        aic_order,
        chosen_order,
        calibrated,
        incidence,
    })
}

/// AIC ranks the orders on the training days; the best few are compared by
/// one-step prediction error on the validation days.
fn choose_order(train: &[Vec<Vec<f64>>], valid: &[Vec<Vec<f64>>], cfg: &PrepareConfig) -> Result<(usize, usize)> {
    let max = cfg.max_ar_order.max(1);
    let mut ranked = Vec::new();
    for order in 1..=max {
        match ar_aic(train, order, max) {
            Ok(aic) => ranked.push((order, aic)),
            Err(Error::DegenerateFit { .. }) if order > 1 => continue,
            Err(e) => return Err(e),
        }
    }
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let aic_order = ranked[0].0;
    if valid.is_empty() {
        return Ok((aic_order, aic_order));
    }
    let mut best = (aic_order, f64::INFINITY);
    for &(order, _) in ranked.iter().take(cfg.validation_candidates.max(1)) {
        let model = fit_ar_pooled(train, order)?;
        let mse = one_step_mse(valid, &model, max);
        if mse < best.1 {
            best = (order, mse);
        }
    }
    Ok((aic_order, best.0))
}

fn one_step_mse(days: &[Vec<Vec<f64>>], model: &ARTransitionModel, start: usize) -> f64 {
    let (mut sum, mut count) = (0.0, 0usize);
    for day in days {
        let series: Vec<DVector<f64>> = day.iter().map(|x| DVector::from_column_slice(x)).collect();
        for h in start.max(model.order())..series.len() {
            let history: Vec<&DVector<f64>> = (1..=model.order()).map(|k| &series[h - k]).collect();
            sum += (&series[h] - model.predict(&history)).norm_squared();
            count += series[h].len();
        }
    }
    if count == 0 {
        f64::INFINITY
    } else {
        sum / count as f64
    }
}

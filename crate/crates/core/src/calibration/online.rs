//! The online loop: one stored window-start snapshot, staggered Jacobian
//! sweeps, a filter update per interval and k-step predictions.

use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::metrics::{compute_metrics, HorizonMetrics, MetricsReport};
use super::model::TrafficModel;
use crate::error::{Error, Result};
use crate::filter::{run_interval, FilterConfig, IntervalDiagnostics, IntervalInputs, LinearizedMeasurement};
use crate::gradient::{
    fd_jacobian, multi_start_color, psp_jacobian, ColorAssignment, EvaluationCounters, GradientMode, IncidenceMatrix,
    StaggeredSchedule,
};
use crate::statespace::{
    build_companion, ARTransitionModel, AugmentedState, CompanionTransition, HistoricalProfile, MeasurementNoiseModel,
};

/// Perturbation size: `relative` times the historical flow, at least `floor`
/// (both in vehicles per interval).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbationPolicy {
    pub relative: f64,
    pub floor: f64,
}

impl Default for PerturbationPolicy {
    /// 5% of the historical flow, at least 1 veh/h over a five-minute interval.
    fn default() -> Self {
        Self {
            relative: 0.05,
            floor: 1.0 / 12.0,
        }
    }
}

impl PerturbationPolicy {
    fn step(&self, historical: f64) -> f64 {
        (self.relative * historical).max(self.floor)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OnlineConfig {
    pub filter: FilterConfig,
    pub gradient: GradientMode,
    pub prediction_steps: usize,
    pub perturbation: PerturbationPolicy,
    /// Use every AR lag for the prior mean even when the window is shorter
    /// than the AR order; otherwise lags beyond the window are dropped.
    pub full_ar_mean: bool,
    /// Diagonal of the initial covariance; the process noise when unset.
    pub initial_variance: Option<f64>,
    /// Re-sweep every interval of the window each step instead of reusing
    /// cached blocks. Only useful as a cost baseline.
    pub recompute_gradients: bool,
    /// Keep every posterior (mean and covariance) in the result.
    pub keep_posteriors: bool,
    /// Accumulate the non-zero pattern (entries above this magnitude) of
    /// every Jacobian block, by lag.
    pub record_incidence: Option<f64>,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        Self {
            filter: FilterConfig::default(),
            gradient: GradientMode::Fd,
            prediction_steps: 3,
            perturbation: PerturbationPolicy::default(),
            full_ar_mean: true,
            initial_variance: None,
            recompute_gradients: false,
            keep_posteriors: false,
            record_incidence: None,
        }
    }
}

impl OnlineConfig {
    pub fn validate(&self) -> Result<()> {
        self.filter.validate()?;
        if self.prediction_steps == 0 {
            return Err(Error::InvalidArgument("prediction_steps must be >= 1".into()));
        }
        let p = &self.perturbation;
        if !(p.relative >= 0.0) || !(p.floor > 0.0) {
            return Err(Error::InvalidArgument(
                "perturbation needs relative >= 0 and floor > 0".into(),
            ));
        }
        if let Some(v) = self.initial_variance {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument("initial_variance must be finite and >= 0".into()));
            }
        }
        Ok(())
    }
}

/// Coloring and per-lag incidence for partitioned perturbation. `offsets[b]`
/// marks which sensors respond `b` intervals after an OD departs.
#[derive(Debug, Clone, PartialEq)]
pub struct PspPattern {
    coloring: ColorAssignment,
    offsets: Vec<IncidenceMatrix>,
}

impl PspPattern {
    pub fn new(coloring: ColorAssignment, offsets: Vec<IncidenceMatrix>) -> Result<Self> {
        if offsets.is_empty() {
            return Err(Error::InvalidArgument("PSP pattern needs at least one lag".into()));
        }
        coloring.validate(&IncidenceMatrix::vstack(&offsets)?)?;
        Ok(Self { coloring, offsets })
    }

    /// Colors the stacked incidence with `starts` random orders.
    pub fn colored(offsets: Vec<IncidenceMatrix>, starts: usize, seed: u64) -> Result<Self> {
        let coloring = multi_start_color(&IncidenceMatrix::vstack(&offsets)?, starts, seed)?;
        Self::new(coloring, offsets)
    }

    pub fn coloring(&self) -> &ColorAssignment {
        &self.coloring
    }

    pub fn offsets(&self) -> &[IncidenceMatrix] {
        &self.offsets
    }

    fn stacked(&self, len: usize) -> Result<IncidenceMatrix> {
        if len > self.offsets.len() {
            return Err(Error::dim("PSP incidence lags", len, self.offsets.len()));
        }
        IncidenceMatrix::vstack(&self.offsets[..len])
    }
}

/// Historical profile, transition and noise the loop runs on.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationInputs {
    pub historical: HistoricalProfile,
    pub ar: ARTransitionModel,
    pub noise: MeasurementNoiseModel,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntervalRecord {
    pub interval: usize,
    #[serde(skip)]
    pub diagnostics: IntervalDiagnostics,
    pub counters: EvaluationCounters,
    /// Intervals the model itself reported during the Jacobian sweeps.
    pub model_gradient_intervals: u64,
    /// Intervals the model reported for the whole step.
    pub model_intervals: u64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictionRecord {
    /// Steps ahead of the interval the prediction was made at.
    pub horizon: usize,
    /// Interval being predicted.
    pub interval: usize,
    pub counts: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OnlineResult {
    /// Final OD flows per interval (vehicles per interval).
    pub estimates: Vec<Vec<f64>>,
    /// Readings simulated from the posterior at each interval.
    pub estimated_counts: Vec<Vec<f64>>,
    pub predictions: Vec<PredictionRecord>,
    pub records: Vec<IntervalRecord>,
    /// How many filter updates estimated each interval's flows.
    pub estimation_counts: Vec<usize>,
    pub posteriors: Vec<AugmentedState>,
    pub totals: EvaluationCounters,
    /// Recorded Jacobian patterns by lag, when requested.
    pub incidence: Vec<IncidenceMatrix>,
}

impl OnlineResult {
    /// `(predicted, observed)` rows for one prediction horizon, in interval order.
    pub fn prediction_pairs(&self, horizon: usize, observed: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        self.predictions
            .iter()
            .filter(|p| p.horizon == horizon)
            .map(|p| (p.counts.clone(), observed[p.interval].clone()))
            .unzip()
    }

    /// Estimation metrics (horizon 0) followed by each prediction horizon.
    pub fn metrics(&self, observed: &[Vec<f64>], noise: &MeasurementNoiseModel) -> Result<MetricsReport> {
        let mut horizons = vec![HorizonMetrics {
            horizon: 0,
            metrics: compute_metrics(&self.estimated_counts, &observed[..self.estimated_counts.len()], noise)?,
        }];
        let max_h = self.predictions.iter().map(|p| p.horizon).max().unwrap_or(0);
        for k in 1..=max_h {
            let (pred, obs) = self.prediction_pairs(k, observed);
            horizons.push(HorizonMetrics {
                horizon: k,
                metrics: compute_metrics(&pred, &obs, noise)?,
            });
        }
        Ok(MetricsReport { horizons })
    }
}

/// Resumable online calibrator. `step` either completes an interval or
/// leaves the calibrator untouched, so a failed interval can be retried or
/// the partial result inspected.
pub struct OnlineCalibrator<'m, M: TrafficModel> {
    model: &'m M,
    inputs: CalibrationInputs,
    observed: Vec<Vec<f64>>,
    config: OnlineConfig,
    psp: Option<PspPattern>,
    transition: CompanionTransition,
    next: usize,
    posterior: AugmentedState,
    deviations: Vec<DVector<f64>>,
    window_start: usize,
    snapshot: M::State,
    schedule: StaggeredSchedule,
    result: OnlineResult,
}

impl<'m, M: TrafficModel> OnlineCalibrator<'m, M> {
    pub fn new(
        model: &'m M,
        inputs: CalibrationInputs,
        observed: Vec<Vec<f64>>,
        config: OnlineConfig,
        psp: Option<PspPattern>,
    ) -> Result<Self> {
        config.validate()?;
        let (n, m, horizon) = (model.num_params(), model.num_measurements(), observed.len());
        let degree = config.filter.degree;
        let hist = &inputs.historical;
        if hist.num_params() != n {
            return Err(Error::dim("historical OD count", n, hist.num_params()));
        }
        if hist.num_measurements() != m {
            return Err(Error::dim("historical sensor count", m, hist.num_measurements()));
        }
        if hist.intervals() < horizon {
            return Err(Error::dim("historical intervals", horizon, hist.intervals()));
        }
        if inputs.noise.len() != m {
            return Err(Error::dim("measurement noise", m, inputs.noise.len()));
        }
        if inputs.ar.dim() != n {
            return Err(Error::dim("AR dimension", n, inputs.ar.dim()));
        }
        if let Some(bad) = observed.iter().find(|y| y.len() != m) {
            return Err(Error::dim("observed readings", m, bad.len()));
        }
        match (&config.gradient, &psp) {
            (GradientMode::Psp, None) => {
                return Err(Error::InvalidArgument("PSP gradients need a coloring and incidence".into()))
            }
            (GradientMode::Psp, Some(p)) => {
                if p.coloring.num_params() != n {
                    return Err(Error::dim("coloring size", n, p.coloring.num_params()));
                }
                if p.offsets.len() < degree.min(horizon) || p.offsets[0].nrows() != m {
                    return Err(Error::InvalidArgument(format!(
                        "PSP incidence must cover {} lags of {m} sensors",
                        degree.min(horizon)
                    )));
                }
            }
            _ => {}
        }
        let transition = build_companion(&inputs.ar, degree)?;
        let p0 = config.initial_variance.unwrap_or(inputs.ar.noise_variance_q());
        let schedule = StaggeredSchedule::new(degree, horizon, config.recompute_gradients)?;
        Ok(Self {
            model,
            inputs,
            config,
            psp,
            transition,
            next: 0,
            posterior: AugmentedState::zeros(n, degree, p0),
            deviations: Vec::with_capacity(horizon),
            window_start: 0,
            snapshot: model.initial_state(),
            schedule,
            result: OnlineResult {
                estimation_counts: vec![0; horizon],
                ..OnlineResult::default()
            },
            observed,
        })
    }

    pub fn horizon(&self) -> usize {
        self.observed.len()
    }

    /// Index of the next interval to calibrate.
    pub fn next_interval(&self) -> usize {
        self.next
    }

    pub fn is_finished(&self) -> bool {
        self.next >= self.horizon()
    }

    /// Start of the current window; the stored snapshot sits there.
    pub fn window_start(&self) -> usize {
        self.window_start
    }

    pub fn result(&self) -> &OnlineResult {
        &self.result
    }

    pub fn run_to_end(&mut self) -> Result<()> {
        while !self.is_finished() {
            self.step()?;
        }
        Ok(())
    }

    /// Result with final estimates for every interval calibrated so far.
    pub fn finish(mut self) -> OnlineResult {
        let hist = &self.inputs.historical;
        self.result.estimates = self
            .deviations
            .iter()
            .enumerate()
            .map(|(j, d)| reconstruct(hist.flows(j), d))
            .collect();
        self.result
    }

    /// Calibrates the next interval.
    pub fn step(&mut self) -> Result<()> {
        let t = self.next;
        let horizon = self.horizon();
        if t >= horizon {
            return Err(Error::InvalidArgument("calibration horizon exhausted".into()));
        }
        let clock = Instant::now();
        let model_start = self.model.intervals_simulated();
        let model = self.model;
        let (n, m) = (model.num_params(), model.num_measurements());
        let degree = self.config.filter.degree;
        let w = self.window_start;
        let hist = &self.inputs.historical;
        let ar = &self.inputs.ar;
        let mut counters = EvaluationCounters::default();
        let ar_lags = if self.config.full_ar_mean { ar.order() } else { ar.order().min(degree) };

        // Prior mean. Lags older than the window come from frozen estimates.
        let mut prior_mean = &self.transition.phi * &self.posterior.stacked;
        if self.config.full_ar_mean && ar.order() > degree {
            let newest = forecast(ar, ar_lags, &self.deviations, 1).remove(0);
            prior_mean.rows_mut(0, n).copy_from(&newest);
        }
        let prior_block = |j: usize| prior_mean.rows((t - j) * n, n).into_owned();
        let prior_flows: Vec<Vec<f64>> = (w..=t).map(|j| reconstruct(hist.flows(j), &prior_block(j))).collect();

        // Nominal replay from the window snapshot.
        let mut state = self.snapshot.clone();
        let mut starts = Vec::with_capacity(t + 1 - w);
        let mut nominal = Vec::new();
        for f in &prior_flows {
            starts.push(state.clone());
            nominal = model.advance(&mut state, f)?;
        }
        counters.nominal_intervals = t + 1 - w;

        // Jacobian sweeps, with future flows rolled forward by the AR model.
        let mut schedule = self.schedule.clone();
        let plans = schedule.sweeps_for(t);
        let last = plans.iter().map(|p| p.last).max().unwrap_or(t);
        let mut prior_history: Vec<DVector<f64>> = self.deviations[w.saturating_sub(ar.order())..w].to_vec();
        prior_history.extend((w..=t).map(prior_block));
        let future_flows: Vec<Vec<f64>> = forecast(ar, ar_lags, &prior_history, last - t)
            .iter()
            .enumerate()
            .map(|(i, d)| reconstruct(hist.flows(t + 1 + i), d))
            .collect();
        let sweep_start = model.intervals_simulated();
        let mut incidence: Vec<(usize, IncidenceMatrix)> = Vec::new();
        for plan in plans {
            let k = plan.perturbed_interval;
            let start = &starts[k - w];
            let fixed: Vec<&Vec<f64>> = (k + 1..=plan.last)
                .map(|j| if j <= t { &prior_flows[j - w] } else { &future_flows[j - t - 1] })
                .collect();
            let eval = |x: &[f64]| -> Result<Vec<f64>> {
                let mut s = start.clone();
                let mut out = model.advance(&mut s, x)?;
                for f in &fixed {
                    out.extend(model.advance(&mut s, f)?);
                }
                Ok(out)
            };
            let base = &prior_flows[k - w];
            let policy = &self.config.perturbation;
            let estimate = match self.config.gradient {
                GradientMode::Fd => {
                    let steps: Vec<f64> = hist.flows(k).iter().map(|h| policy.step(*h)).collect();
                    let point: Vec<f64> = base.iter().zip(&steps).map(|(x, d)| x.max(*d)).collect();
                    fd_jacobian(eval, &point, &steps)?
                }
                GradientMode::Psp => {
                    let psp = self.psp.as_ref().expect("checked in new");
                    let groups = psp.coloring.groups();
                    let steps: Vec<f64> = groups
                        .iter()
                        .map(|g| {
                            let mean = g.iter().map(|&j| hist.flows(k)[j]).sum::<f64>() / g.len().max(1) as f64;
                            policy.step(mean)
                        })
                        .collect();
                    let point: Vec<f64> = base
                        .iter()
                        .enumerate()
                        .map(|(j, x)| x.max(steps[psp.coloring.color_of(j)]))
                        .collect();
                    psp_jacobian(eval, &point, &psp.coloring, &psp.stacked(plan.len())?, &steps)?
                }
            };
            counters.gradient_evaluations += estimate.evaluations;
            counters.gradient_intervals += estimate.evaluations * plan.len();
            schedule.record(&plan, &estimate.matrix)?;
            if let Some(threshold) = self.config.record_incidence {
                for h in plan.first..=plan.last {
                    let block = schedule.cache().get(h, k).expect("just recorded");
                    incidence.push((h - k, IncidenceMatrix::from_dense(block, threshold)));
                }
            }
        }
        let model_gradient_intervals = model.intervals_simulated() - sweep_start;

        // Filter update.
        let yh = DVector::from_column_slice(hist.measurements(t));
        let lin = LinearizedMeasurement {
            theta: schedule.theta(t, m, n)?,
            base_prediction: DVector::from_vec(nominal) - &yh,
            observed_deviation: DVector::from_column_slice(&self.observed[t]) - &yh,
            interval: t,
        };
        let lower = -hist.stacked(t, degree);
        let outcome = run_interval(
            &self.posterior,
            &self.transition,
            |_| Ok(lin),
            IntervalInputs {
                noise: &self.inputs.noise,
                lower_bounds: &lower,
                interval: t,
                prior_mean: Some(prior_mean.clone()),
            },
            &self.config.filter,
        )?;
        let posterior = outcome.posterior;
        let mut deviations = self.deviations.clone();
        deviations.truncate(w);
        deviations.extend((w..=t).map(|j| posterior.stacked.rows((t - j) * n, n).into_owned()));

        // Estimated readings and k-step predictions from the window snapshot.
        let ahead = self.config.prediction_steps.min(horizon - 1 - t);
        let mut s = self.snapshot.clone();
        let mut estimated = Vec::new();
        for j in w..=t {
            estimated = model.advance(&mut s, &reconstruct(hist.flows(j), &deviations[j]))?;
        }
        let mut predictions = Vec::with_capacity(ahead);
        for (i, d) in forecast(ar, ar_lags, &deviations, ahead).iter().enumerate() {
            let target = t + 1 + i;
            predictions.push(PredictionRecord {
                horizon: i + 1,
                interval: target,
                counts: model.advance(&mut s, &reconstruct(hist.flows(target), d))?,
            });
        }
        counters.prediction_intervals = t + 1 - w + ahead;

        // Freeze the oldest estimate and move the snapshot once the window is full.
        let next_start = (t + 2).saturating_sub(degree);
        let mut snapshot = None;
        if next_start > w {
            let mut s = self.snapshot.clone();
            for j in w..next_start {
                model.advance(&mut s, &reconstruct(hist.flows(j), &deviations[j]))?;
                counters.advance_intervals += 1;
            }
            snapshot = Some(s);
        }

        let merged_incidence = if incidence.is_empty() {
            None
        } else {
            let mut merged = self.result.incidence.clone();
            for (lag, pattern) in incidence {
                if merged.len() <= lag {
                    merged.resize(lag + 1, IncidenceMatrix::new(m, n));
                }
                merged[lag] = merged[lag].union(&pattern)?;
            }
            Some(merged)
        };

        // Commit.
        if let Some(s) = snapshot {
            self.snapshot = s;
        }
        self.window_start = next_start;
        self.schedule = schedule;
        self.deviations = deviations;
        for j in w..=t {
            self.result.estimation_counts[j] += 1;
        }
        if self.config.keep_posteriors {
            self.result.posteriors.push(posterior.clone());
        }
        self.posterior = posterior;
        self.result.estimated_counts.push(estimated);
        self.result.predictions.extend(predictions);
        self.result.totals.accumulate(&counters);
        if let Some(merged) = merged_incidence {
            self.result.incidence = merged;
        }
        self.result.records.push(IntervalRecord {
            interval: t,
            diagnostics: outcome.diagnostics,
            counters,
            model_gradient_intervals,
            model_intervals: model.intervals_simulated() - model_start,
            wall_seconds: clock.elapsed().as_secs_f64(),
        });
        self.next += 1;
        log::debug!("calibrated interval {t} ({:.3} s)", clock.elapsed().as_secs_f64());
        Ok(())
    }
}

/// Calibrates every interval of `observed`.
pub fn run_online<M: TrafficModel>(
    model: &M,
    inputs: CalibrationInputs,
    observed: Vec<Vec<f64>>,
    config: OnlineConfig,
    psp: Option<PspPattern>,
) -> Result<OnlineResult> {
    let mut calibrator = OnlineCalibrator::new(model, inputs, observed, config, psp)?;
    calibrator.run_to_end()?;
    Ok(calibrator.finish())
}

/// Historical flow plus deviation, clamped at zero.
pub(crate) fn reconstruct(historical: &[f64], deviation: &DVector<f64>) -> Vec<f64> {
    historical.iter().zip(deviation.iter()).map(|(h, d)| (h + d).max(0.0)).collect()
}

/// Rolls deviations forward `steps` intervals with zero process noise, using
/// the first `lags` AR lags. `history` is chronological; missing lags count
/// as zero deviation.
pub(crate) fn forecast(ar: &ARTransitionModel, lags: usize, history: &[DVector<f64>], steps: usize) -> Vec<DVector<f64>> {
    let keep = history.len().saturating_sub(lags);
    let mut window: Vec<DVector<f64>> = history[keep..].to_vec();
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut next = DVector::zeros(ar.dim());
        for (k, f) in ar.coefficient_matrices().iter().take(lags).enumerate() {
            if let Some(i) = window.len().checked_sub(k + 1) {
                next += f * &window[i];
            }
        }
        window.push(next.clone());
        out.push(next);
    }
    out
}

//! Extended Kalman filter over augmented deviation states, with an optional
//! non-negativity projection of the posterior.

mod qp;

pub use qp::{solve_bound_qp, QpSolution};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{is_all_zero, symmetrize};
use crate::statespace::{time_update, AugmentedState, CompanionTransition, HistoricalProfile, MeasurementNoiseModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintMode {
    Unconstrained,
    #[default]
    Nonneg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub degree: usize,
    pub constraint_mode: ConstraintMode,
    /// Ridge added to the innovation matrix, relative to its mean diagonal.
    pub gain_regularization: f64,
    pub qp_tolerance: f64,
    /// Zero picks a cap proportional to the state length.
    pub qp_max_iterations: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            degree: 1,
            constraint_mode: ConstraintMode::Nonneg,
            gain_regularization: 1e-8,
            qp_tolerance: 1e-9,
            qp_max_iterations: 0,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.degree == 0 {
            return Err(Error::InvalidArgument("degree must be >= 1".into()));
        }
        if !(self.qp_tolerance > 0.0) || !(self.gain_regularization >= 0.0) {
            return Err(Error::InvalidArgument(
                "qp_tolerance must be > 0 and gain_regularization >= 0".into(),
            ));
        }
        Ok(())
    }

    fn qp_cap(&self, len: usize) -> usize {
        if self.qp_max_iterations > 0 {
            self.qp_max_iterations
        } else {
            4 * len + 50
        }
    }
}

/// Measurement model linearised at the prior.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedMeasurement {
    /// `[H_h^h, H_h^{h-1}, ...]`, m x (r n).
    pub theta: DMatrix<f64>,
    /// Simulated measurements at the prior, minus the historical measurements.
    pub base_prediction: DVector<f64>,
    /// Observed measurements minus the historical measurements.
    pub observed_deviation: DVector<f64>,
    pub interval: usize,
}

impl LinearizedMeasurement {
    pub fn innovation(&self) -> DVector<f64> {
        &self.observed_deviation - &self.base_prediction
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntervalDiagnostics {
    pub interval: usize,
    pub innovation_norm: f64,
    pub gain_norm: f64,
    pub active_constraints: usize,
    pub qp_iterations: usize,
    pub prior_trace: f64,
    pub posterior_trace: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateOutcome {
    pub state: AugmentedState,
    pub gain: DMatrix<f64>,
}

/// Kalman gain and Joseph-form covariance update.
pub fn measurement_update(
    prior: &AugmentedState,
    lin: &LinearizedMeasurement,
    noise: &MeasurementNoiseModel,
    cfg: &FilterConfig,
) -> Result<UpdateOutcome> {
    let len = prior.stacked.len();
    let m = lin.theta.nrows();
    if lin.theta.ncols() != len {
        return Err(Error::dim("jacobian columns", len, lin.theta.ncols()));
    }
    if lin.base_prediction.len() != m || lin.observed_deviation.len() != m || noise.len() != m {
        return Err(Error::dim("measurement length", m, noise.len()));
    }
    if lin.theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "non-finite jacobian at interval {}",
            lin.interval
        )));
    }
    if m == 0 || is_all_zero(&lin.theta) {
        return Ok(UpdateOutcome {
            state: prior.clone(),
            gain: DMatrix::zeros(len, m),
        });
    }

    let p = &prior.covariance;
    let theta_p = &lin.theta * p;
    let mut r_eff = noise.matrix();
    let mut s = &theta_p * lin.theta.transpose() + &r_eff;
    symmetrize(&mut s);
    let ridge = cfg.gain_regularization * s.trace() / m as f64;
    for i in 0..m {
        s[(i, i)] += ridge;
        r_eff[(i, i)] += ridge;
    }
    let chol = s
        .cholesky()
        .ok_or(Error::SingularInnovation { interval: lin.interval })?;
    let gain = chol.solve(&theta_p).transpose();

    let stacked = &prior.stacked + &gain * lin.innovation();
    let ikh = DMatrix::identity(len, len) - &gain * &lin.theta;
    let mut covariance = &ikh * p * ikh.transpose() + &gain * r_eff * gain.transpose();
    symmetrize(&mut covariance);
    Ok(UpdateOutcome {
        state: AugmentedState::new(stacked, covariance, prior.degree())?,
        gain,
    })
}

/// Projects the posterior onto `x + history >= 0` in the metric of its own
/// covariance. `lower` holds `-history` for the stacked window.
pub fn constrain_with_bounds(
    post: &AugmentedState,
    lower: &DVector<f64>,
    cfg: &FilterConfig,
) -> Result<(AugmentedState, QpSolution)> {
    let sol = solve_bound_qp(
        &post.stacked,
        &post.covariance,
        lower,
        cfg.qp_tolerance,
        cfg.qp_cap(post.stacked.len()),
    )?;
    let mut out = post.clone();
    out.stacked.copy_from(&sol.z);
    Ok((out, sol))
}

/// Non-negativity projection for the window ending at `interval`.
pub fn constrain_posterior(
    post: &AugmentedState,
    historical: &HistoricalProfile,
    interval: usize,
    cfg: &FilterConfig,
) -> Result<AugmentedState> {
    let lower = -historical.stacked(interval, post.degree());
    constrain_with_bounds(post, &lower, cfg).map(|(s, _)| s)
}

/// What the caller supplies for one filter interval.
pub struct IntervalInputs<'a> {
    pub noise: &'a MeasurementNoiseModel,
    /// Lower bounds on the stacked deviations (`-inf` disables a bound).
    pub lower_bounds: &'a DVector<f64>,
    pub interval: usize,
    /// Replaces `Phi X` as the prior mean, e.g. when the full AR history is
    /// longer than the augmentation window.
    pub prior_mean: Option<DVector<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntervalOutcome {
    pub prior: AugmentedState,
    pub posterior: AugmentedState,
    pub diagnostics: IntervalDiagnostics,
}

/// Time update, linearisation, measurement update and projection for one
/// interval. `linearize` receives the prior.
pub fn run_interval<F>(
    previous: &AugmentedState,
    trans: &CompanionTransition,
    linearize: F,
    inputs: IntervalInputs<'_>,
    cfg: &FilterConfig,
) -> Result<IntervalOutcome>
where
    F: FnOnce(&AugmentedState) -> Result<LinearizedMeasurement>,
{
    let mut prior = time_update(previous, trans)?;
    if let Some(mean) = inputs.prior_mean {
        if mean.len() != prior.stacked.len() {
            return Err(Error::dim("prior mean", prior.stacked.len(), mean.len()));
        }
        prior.stacked = mean;
    }
    let lin = linearize(&prior)?;
    let update = measurement_update(&prior, &lin, inputs.noise, cfg)?;
    let (posterior, active, iterations) = match cfg.constraint_mode {
        ConstraintMode::Unconstrained => (update.state, 0, 0),
        ConstraintMode::Nonneg => {
            let (s, sol) = constrain_with_bounds(&update.state, inputs.lower_bounds, cfg)?;
            (s, sol.active.len(), sol.iterations)
        }
    };
    let diagnostics = IntervalDiagnostics {
        interval: inputs.interval,
        innovation_norm: lin.innovation().norm(),
        gain_norm: update.gain.norm(),
        active_constraints: active,
        qp_iterations: iterations,
        prior_trace: prior.covariance.trace(),
        posterior_trace: posterior.covariance.trace(),
    };
    Ok(IntervalOutcome {
        prior,
        posterior,
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::statespace::{build_companion, ARTransitionModel};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn lin(theta: DMatrix<f64>, innovation: Vec<f64>) -> LinearizedMeasurement {
        let m = theta.nrows();
        LinearizedMeasurement {
            theta,
            base_prediction: DVector::zeros(m),
            observed_deviation: DVector::from_vec(innovation),
            interval: 3,
        }
    }

    fn exact_cfg() -> FilterConfig {
        FilterConfig {
            gain_regularization: 0.0,
            ..FilterConfig::default()
        }
    }

    #[test]
    fn scalar_update() {
        let prior = AugmentedState::new(DVector::zeros(1), DMatrix::identity(1, 1), 1).unwrap();
        let noise = MeasurementNoiseModel::new(vec![1.0]).unwrap();
        let out = measurement_update(&prior, &lin(DMatrix::identity(1, 1), vec![2.0]), &noise, &exact_cfg()).unwrap();
        assert_abs_diff_eq!(out.gain[(0, 0)], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(out.state.stacked[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(out.state.covariance[(0, 0)], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn zero_jacobian_keeps_prior() {
        let prior = AugmentedState::new(
            DVector::from_vec(vec![1.0, -2.0]),
            DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]),
            1,
        )
        .unwrap();
        let noise = MeasurementNoiseModel::new(vec![1.0]).unwrap();
        let out = measurement_update(&prior, &lin(DMatrix::zeros(1, 2), vec![5.0]), &noise, &FilterConfig::default()).unwrap();
        assert_eq!(out.state, prior);
    }

    #[test]
    fn two_state_one_sensor() {
        let prior = AugmentedState::new(DVector::zeros(2), DMatrix::identity(2, 2), 1).unwrap();
        let noise = MeasurementNoiseModel::new(vec![1.0]).unwrap();
        let theta = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let out = measurement_update(&prior, &lin(theta, vec![3.0]), &noise, &exact_cfg()).unwrap();
        assert_abs_diff_eq!(out.state.stacked, DVector::from_vec(vec![1.5, 0.0]), epsilon = 1e-15);
        assert_abs_diff_eq!(out.state.covariance, DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 1.0]), epsilon = 1e-15);
    }

    #[test]
    fn singular_innovation_names_interval() {
        let prior = AugmentedState::new(DVector::zeros(1), DMatrix::zeros(1, 1), 1).unwrap();
        let noise = MeasurementNoiseModel::with_exact(vec![0.0]).unwrap();
        let res = measurement_update(&prior, &lin(DMatrix::identity(1, 1), vec![1.0]), &noise, &FilterConfig::default());
        assert!(matches!(res, Err(Error::SingularInnovation { interval: 3 })));
    }

    #[test]
    fn constrain_scalar_to_zero_flow() {
        let post = AugmentedState::new(DVector::from_element(1, -5.0), DMatrix::identity(1, 1), 1).unwrap();
        let hist = HistoricalProfile::new(vec![vec![3.0]], vec![vec![]]).unwrap();
        let z = constrain_posterior(&post, &hist, 0, &FilterConfig::default()).unwrap();
        assert_eq!(z.stacked[0], -3.0);
    }

    #[test]
    fn constrain_feasible_is_bit_identical() {
        let post = AugmentedState::new(DVector::from_vec(vec![0.1, -1.0]), DMatrix::identity(2, 2), 1).unwrap();
        let hist = HistoricalProfile::new(vec![vec![3.0, 1.0]], vec![vec![]]).unwrap();
        let z = constrain_posterior(&post, &hist, 0, &FilterConfig::default()).unwrap();
        assert_eq!(z, post);
    }

    #[test]
    fn noiseless_scalar_converges_to_truth() {
        let ar = ARTransitionModel::from_scalars(&[1.0], 1, 0.0).unwrap();
        let trans = build_companion(&ar, 1).unwrap();
        let noise = MeasurementNoiseModel::with_exact(vec![0.0]).unwrap();
        let lower = DVector::from_element(1, f64::NEG_INFINITY);
        let truth = 7.0;
        let mut state = AugmentedState::new(DVector::zeros(1), DMatrix::identity(1, 1), 1).unwrap();
        for h in 0..3 {
            let out = run_interval(
                &state,
                &trans,
                |prior| {
                    Ok(LinearizedMeasurement {
                        theta: DMatrix::from_element(1, 1, 2.0),
                        base_prediction: prior.stacked.clone() * 2.0,
                        observed_deviation: DVector::from_element(1, 2.0 * truth),
                        interval: h,
                    })
                },
                IntervalInputs { noise: &noise, lower_bounds: &lower, interval: h, prior_mean: None },
                &FilterConfig::default(),
            )
            .unwrap();
            state = out.posterior;
        }
        assert_abs_diff_eq!(state.stacked[0], truth, epsilon = 1e-6);
    }

    #[test]
    fn diagnostics_count_active_bounds() {
        let ar = ARTransitionModel::from_scalars(&[1.0], 2, 0.0).unwrap();
        let trans = build_companion(&ar, 1).unwrap();
        let noise = MeasurementNoiseModel::new(vec![1e-6]).unwrap();
        let lower = DVector::from_vec(vec![-1.0, -1.0]);
        let state = AugmentedState::new(DVector::zeros(2), DMatrix::identity(2, 2), 1).unwrap();
        let out = run_interval(
            &state,
            &trans,
            |_| Ok(lin(DMatrix::from_row_slice(1, 2, &[1.0, 1.0]), vec![-10.0])),
            IntervalInputs { noise: &noise, lower_bounds: &lower, interval: 0, prior_mean: None },
            &FilterConfig::default(),
        )
        .unwrap();
        assert_eq!(out.diagnostics.active_constraints, 2);
        assert_eq!(out.posterior.stacked.as_slice(), &[-1.0, -1.0]);
    }

    fn arb_update() -> impl Strategy<Value = (AugmentedState, DMatrix<f64>, Vec<f64>, Vec<f64>)> {
        (1usize..5, 1usize..4).prop_flat_map(|(n, m)| {
            (
                prop::collection::vec(-1.0f64..1.0, n * n),
                prop::collection::vec(-3.0f64..3.0, m * n),
                prop::collection::vec(0.1f64..5.0, m),
                prop::collection::vec(-10.0f64..10.0, m),
            )
                .prop_map(move |(a, t, r, innov)| {
                    let a = DMatrix::from_vec(n, n, a);
                    let p = &a * a.transpose() + DMatrix::identity(n, n) * 0.05;
                    (
                        AugmentedState::new(DVector::zeros(n), p, 1).unwrap(),
                        DMatrix::from_vec(m, n, t),
                        r,
                        innov,
                    )
                })
        })
    }

    proptest! {
        #[test]
        fn trace_never_increases((prior, theta, r, innov) in arb_update()) {
            let noise = MeasurementNoiseModel::new(r).unwrap();
            let out = measurement_update(&prior, &lin(theta, innov), &noise, &FilterConfig::default()).unwrap();
            let (before, after) = (prior.covariance.trace(), out.state.covariance.trace());
            prop_assert!(after <= before * (1.0 + 1e-10));
        }

        #[test]
        fn joseph_matches_short_form((prior, theta, r, innov) in arb_update()) {
            let noise = MeasurementNoiseModel::new(r.clone()).unwrap();
            let out = measurement_update(&prior, &lin(theta.clone(), innov), &noise, &exact_cfg()).unwrap();
            let p = &prior.covariance;
            let s = &theta * p * theta.transpose() + noise.matrix();
            let k = p * theta.transpose() * s.try_inverse().unwrap();
            let short = p - &k * &theta * p;
            let err = (&out.state.covariance - short).amax();
            prop_assert!(err <= 1e-9 * (1.0 + p.amax()));
        }
    }
}

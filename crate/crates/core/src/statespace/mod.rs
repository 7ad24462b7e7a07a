//! Deviation-form state-space model.
//!
//! States are OD-flow deviations from a historical profile. The augmented
//! state stacks the `r` most recent interval deviations, newest first, and
//! evolves through a block-companion transition built from a scalar-per-lag
//! autoregressive model.

mod ar;
mod noise;

pub use ar::{ar_aic, fit_ar, fit_ar_pooled, select_ar_order, select_ar_order_pooled, ArFit};
pub use noise::{estimate_q, estimate_r};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::symmetrize;

/// OD flows (veh/h) of one departure interval.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    pub values: Vec<f64>,
    pub interval: usize,
}

impl ParameterVector {
    pub fn new(values: Vec<f64>, interval: usize) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "parameter {i} of interval {interval} is not finite"
            )));
        }
        Ok(Self { values, interval })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Historical OD flows and the sensor values they produce, per interval.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoricalProfile {
    flows: Vec<Vec<f64>>,
    measurements: Vec<Vec<f64>>,
}

impl HistoricalProfile {
    pub fn new(flows: Vec<Vec<f64>>, measurements: Vec<Vec<f64>>) -> Result<Self> {
        if flows.len() != measurements.len() {
            return Err(Error::dim("historical profile intervals", flows.len(), measurements.len()));
        }
        if let Some(first) = flows.first() {
            let n = first.len();
            if let Some(bad) = flows.iter().find(|f| f.len() != n) {
                return Err(Error::dim("historical flows", n, bad.len()));
            }
        }
        if let Some(first) = measurements.first() {
            let m = first.len();
            if let Some(bad) = measurements.iter().find(|f| f.len() != m) {
                return Err(Error::dim("historical measurements", m, bad.len()));
            }
        }
        let negative = flows
            .iter()
            .chain(measurements.iter())
            .flatten()
            .any(|v| !v.is_finite() || *v < 0.0);
        if negative {
            return Err(Error::InvalidArgument(
                "historical values must be finite and non-negative".into(),
            ));
        }
        Ok(Self { flows, measurements })
    }

    pub fn intervals(&self) -> usize {
        self.flows.len()
    }

    pub fn num_params(&self) -> usize {
        self.flows.first().map_or(0, Vec::len)
    }

    pub fn num_measurements(&self) -> usize {
        self.measurements.first().map_or(0, Vec::len)
    }

    pub fn flows(&self, interval: usize) -> &[f64] {
        &self.flows[interval]
    }

    pub fn measurements(&self, interval: usize) -> &[f64] {
        &self.measurements[interval]
    }

    pub fn all_flows(&self) -> &[Vec<f64>] {
        &self.flows
    }

    /// Stacked historical flows for the window ending at `interval`, newest
    /// block first. Intervals before the horizon are `+inf` so the matching
    /// non-negativity bound is inactive.
    pub fn stacked(&self, interval: usize, degree: usize) -> DVector<f64> {
        let n = self.num_params();
        DVector::from_fn(degree * n, |idx, _| {
            let (block, j) = (idx / n, idx % n);
            match interval.checked_sub(block) {
                Some(k) => self.flows[k][j],
                None => f64::INFINITY,
            }
        })
    }
}

/// `x_h - x_h^H` for one interval.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviationState {
    pub delta: DVector<f64>,
    pub interval: usize,
}

impl DeviationState {
    pub fn from_flows(flows: &[f64], historical: &[f64], interval: usize) -> Result<Self> {
        if flows.len() != historical.len() {
            return Err(Error::dim("deviation", historical.len(), flows.len()));
        }
        Ok(Self {
            delta: DVector::from_iterator(flows.len(), flows.iter().zip(historical).map(|(x, h)| x - h)),
            interval,
        })
    }

    /// Reconstructed flows, clamped at zero.
    pub fn flows(&self, historical: &[f64]) -> Vec<f64> {
        self.delta
            .iter()
            .zip(historical)
            .map(|(d, h)| (d + h).max(0.0))
            .collect()
    }
}

/// Autoregressive transition with one coefficient matrix per lag.
#[derive(Debug, Clone, PartialEq)]
pub struct ARTransitionModel {
    coefficient_matrices: Vec<DMatrix<f64>>,
    noise_variance_q: f64,
}

impl ARTransitionModel {
    pub fn new(coefficient_matrices: Vec<DMatrix<f64>>, noise_variance_q: f64) -> Result<Self> {
        if coefficient_matrices.is_empty() {
            return Err(Error::InvalidArgument("AR order must be at least 1".into()));
        }
        let n = coefficient_matrices[0].nrows();
        for f in &coefficient_matrices {
            if f.nrows() != n || f.ncols() != n {
                return Err(Error::dim("AR coefficient matrix", n, f.ncols().max(f.nrows())));
            }
        }
        if !(noise_variance_q >= 0.0) {
            return Err(Error::InvalidArgument("process noise variance must be >= 0".into()));
        }
        Ok(Self {
            coefficient_matrices,
            noise_variance_q,
        })
    }

    /// Scalar-per-lag model shared by all `n` OD pairs.
    pub fn from_scalars(coefficients: &[f64], n: usize, noise_variance_q: f64) -> Result<Self> {
        let mats = coefficients
            .iter()
            .map(|a| DMatrix::identity(n, n) * *a)
            .collect();
        Self::new(mats, noise_variance_q)
    }

    pub fn order(&self) -> usize {
        self.coefficient_matrices.len()
    }

    pub fn dim(&self) -> usize {
        self.coefficient_matrices[0].nrows()
    }

    pub fn coefficient_matrices(&self) -> &[DMatrix<f64>] {
        &self.coefficient_matrices
    }

    pub fn noise_variance_q(&self) -> f64 {
        self.noise_variance_q
    }

    pub fn with_noise_variance(mut self, q: f64) -> Self {
        self.noise_variance_q = q;
        self
    }

    /// Lag scalars, valid when every matrix is a multiple of the identity.
    pub fn scalar_coefficients(&self) -> Option<Vec<f64>> {
        self.coefficient_matrices
            .iter()
            .map(|f| {
                let a = f[(0, 0)];
                let n = f.nrows();
                let scalar = (0..n).all(|i| (0..n).all(|j| f[(i, j)] == if i == j { a } else { 0.0 }));
                scalar.then_some(a)
            })
            .collect()
    }

    /// One-step prediction from `history`, newest first. Missing lags count
    /// as zero deviation.
    pub fn predict(&self, history: &[&DVector<f64>]) -> DVector<f64> {
        let n = self.dim();
        let mut out = DVector::zeros(n);
        for (f, x) in self.coefficient_matrices.iter().zip(history) {
            out += f * *x;
        }
        out
    }
}

/// Stacked deviations `[dx_h; dx_{h-1}; ...; dx_{h-r+1}]` with covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedState {
    pub stacked: DVector<f64>,
    pub covariance: DMatrix<f64>,
    degree: usize,
    n: usize,
}

impl AugmentedState {
    pub fn new(stacked: DVector<f64>, covariance: DMatrix<f64>, degree: usize) -> Result<Self> {
        if degree == 0 {
            return Err(Error::InvalidArgument("augmentation degree must be >= 1".into()));
        }
        let len = stacked.len();
        if len % degree != 0 {
            return Err(Error::dim("augmented state length", degree * (len / degree + 1), len));
        }
        if covariance.nrows() != len || covariance.ncols() != len {
            return Err(Error::dim("augmented covariance", len, covariance.nrows()));
        }
        Ok(Self {
            stacked,
            covariance,
            degree,
            n: len / degree,
        })
    }

    /// Zero deviations with diagonal covariance `p0` on every entry.
    pub fn zeros(n: usize, degree: usize, p0: f64) -> Self {
        let len = n * degree;
        Self {
            stacked: DVector::zeros(len),
            covariance: DMatrix::from_diagonal_element(len, len, p0),
            degree,
            n,
        }
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn block_len(&self) -> usize {
        self.n
    }

    /// Block `b` (0 = newest).
    pub fn block(&self, b: usize) -> DVector<f64> {
        self.stacked.rows(b * self.n, self.n).into_owned()
    }

    pub fn set_block(&mut self, b: usize, value: &DVector<f64>) {
        self.stacked.rows_mut(b * self.n, self.n).copy_from(value);
    }
}

/// Block-companion transition and its expanded process noise.
#[derive(Debug, Clone, PartialEq)]
pub struct CompanionTransition {
    pub phi: DMatrix<f64>,
    pub q_expanded: DMatrix<f64>,
    degree: usize,
    n: usize,
}

impl CompanionTransition {
    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn block_len(&self) -> usize {
        self.n
    }
}

/// Per-sensor measurement variances (diagonal of R).
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementNoiseModel {
    r_diagonal: Vec<f64>,
    exact: Vec<bool>,
}

impl MeasurementNoiseModel {
    pub fn new(r_diagonal: Vec<f64>) -> Result<Self> {
        if let Some(i) = r_diagonal.iter().position(|r| !(*r > 0.0) || !r.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "variance of sensor {i} must be positive unless the sensor is flagged exact"
            )));
        }
        let exact = vec![false; r_diagonal.len()];
        Ok(Self { r_diagonal, exact })
    }

    /// Variances where zeros are allowed and mark the sensor exact.
    pub fn with_exact(r_diagonal: Vec<f64>) -> Result<Self> {
        if let Some(i) = r_diagonal.iter().position(|r| !(*r >= 0.0) || !r.is_finite()) {
            return Err(Error::InvalidArgument(format!("variance of sensor {i} must be >= 0")));
        }
        let exact = r_diagonal.iter().map(|r| *r == 0.0).collect();
        Ok(Self { r_diagonal, exact })
    }

    /// Coefficient-of-variation heuristic: `r_i = (cv * mean_i)^2`, floored.
    pub fn from_cv(means: &[f64], cv: f64, floor: f64) -> Result<Self> {
        Self::new(means.iter().map(|m| (cv * m).powi(2).max(floor)).collect())
    }

    pub fn len(&self) -> usize {
        self.r_diagonal.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r_diagonal.is_empty()
    }

    pub fn variances(&self) -> &[f64] {
        &self.r_diagonal
    }

    pub fn is_exact(&self, sensor: usize) -> bool {
        self.exact[sensor]
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_column_slice(&self.r_diagonal))
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            r_diagonal: self.r_diagonal.iter().map(|r| r * factor).collect(),
            exact: self.exact.clone(),
        }
    }
}

/// Builds the block-companion transition of degree `degree`.
///
/// Lags beyond `degree` are dropped, which is the upper-left sub-matrix of
/// the full companion form. Process noise enters only the newest block.
pub fn build_companion(ar: &ARTransitionModel, degree: usize) -> Result<CompanionTransition> {
    if degree == 0 {
        return Err(Error::InvalidArgument("augmentation degree must be >= 1".into()));
    }
    let n = ar.dim();
    let len = n * degree;
    let mut phi = DMatrix::zeros(len, len);
    for (lag, f) in ar.coefficient_matrices().iter().take(degree).enumerate() {
        if f.nrows() != n || f.ncols() != n {
            return Err(Error::dim("AR coefficient matrix", n, f.nrows()));
        }
        phi.view_mut((0, lag * n), (n, n)).copy_from(f);
    }
    for i in n..len {
        phi[(i, i - n)] = 1.0;
    }
    let mut q_expanded = DMatrix::zeros(len, len);
    for i in 0..n {
        q_expanded[(i, i)] = ar.noise_variance_q();
    }
    Ok(CompanionTransition {
        phi,
        q_expanded,
        degree,
        n,
    })
}

/// A-priori state and covariance: `Phi X`, `Phi P Phi^T + Q`.
pub fn time_update(state: &AugmentedState, trans: &CompanionTransition) -> Result<AugmentedState> {
    let len = state.stacked.len();
    if trans.phi.nrows() != len {
        return Err(Error::dim("time update", trans.phi.nrows(), len));
    }
    let stacked = &trans.phi * &state.stacked;
    let mut covariance = &trans.phi * &state.covariance * trans.phi.transpose() + &trans.q_expanded;
    symmetrize(&mut covariance);
    Ok(AugmentedState {
        stacked,
        covariance,
        degree: state.degree,
        n: state.n,
    })
}

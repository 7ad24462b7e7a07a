//! Measurement functions the online loop can drive.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::simulator::{SimState, Simulator};

/// A deterministic, resumable map from per-interval OD flows to sensor
/// readings. `advance` must be callable from several threads on distinct
/// states.
pub trait TrafficModel: Sync {
    type State: Clone + Send + Sync;

    fn num_params(&self) -> usize;
    fn num_measurements(&self) -> usize;
    fn initial_state(&self) -> Self::State;
    /// Runs one interval with OD flows in vehicles per interval and returns
    /// the sensor readings of that interval.
    fn advance(&self, state: &mut Self::State, flows: &[f64]) -> Result<Vec<f64>>;
    /// Total intervals advanced so far, across all clones and threads.
    fn intervals_simulated(&self) -> u64;

    /// Readings for consecutive intervals from a copy of `state`.
    fn run(&self, state: &Self::State, flows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let mut s = state.clone();
        flows.iter().map(|f| self.advance(&mut s, f)).collect()
    }
}

/// The mesoscopic simulator seen as a counts-only measurement function.
#[derive(Debug, Clone)]
pub struct SimulatorModel {
    simulator: Simulator,
}

impl SimulatorModel {
    pub fn new(simulator: Simulator) -> Self {
        Self { simulator }
    }

    pub fn simulator(&self) -> &Simulator {
        &self.simulator
    }

    /// Converts vehicles per interval to the simulator's veh/h.
    pub fn to_rates(&self, flows: &[f64]) -> Vec<f64> {
        let per_hour = 3600.0 / self.simulator.interval_seconds();
        flows.iter().map(|f| f * per_hour).collect()
    }

    /// Converts veh/h to vehicles per interval.
    pub fn to_flows(&self, rates: &[f64]) -> Vec<f64> {
        let per_interval = self.simulator.interval_seconds() / 3600.0;
        rates.iter().map(|r| r * per_interval).collect()
    }
}

impl TrafficModel for SimulatorModel {
    type State = SimState;

    fn num_params(&self) -> usize {
        self.simulator.network().num_ods()
    }

    fn num_measurements(&self) -> usize {
        self.simulator.network().num_sensors()
    }

    fn initial_state(&self) -> SimState {
        self.simulator.initial_state()
    }

    fn advance(&self, state: &mut SimState, flows: &[f64]) -> Result<Vec<f64>> {
        Ok(self.simulator.step(state, &self.to_rates(flows))?.frame.counts)
    }

    fn intervals_simulated(&self) -> u64 {
        self.simulator.intervals_simulated()
    }
}

/// Distributed-lag linear map `y_h = sum_k A_k x_{h-k}`.
#[derive(Debug, Clone)]
pub struct LinearModel {
    lags: Vec<DMatrix<f64>>,
    counter: Arc<AtomicU64>,
}

impl LinearModel {
    /// `lags[k]` maps flows `k` intervals back to current readings.
    pub fn new(lags: Vec<DMatrix<f64>>) -> Result<Self> {
        let first = lags
            .first()
            .ok_or_else(|| Error::InvalidArgument("a linear model needs at least one lag matrix".into()))?;
        let shape = first.shape();
        if let Some(bad) = lags.iter().find(|a| a.shape() != shape) {
            return Err(Error::dim("lag matrix", shape.0 * shape.1, bad.nrows() * bad.ncols()));
        }
        if lags.iter().flat_map(|a| a.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("lag matrices must be finite".into()));
        }
        Ok(Self {
            lags,
            counter: Arc::new(AtomicU64::new(0)),
        })
    }

    pub fn lags(&self) -> &[DMatrix<f64>] {
        &self.lags
    }
}

impl TrafficModel for LinearModel {
    /// Most recent flows first.
    type State = VecDeque<DVector<f64>>;

    fn num_params(&self) -> usize {
        self.lags[0].ncols()
    }

    fn num_measurements(&self) -> usize {
        self.lags[0].nrows()
    }

    fn initial_state(&self) -> Self::State {
        VecDeque::new()
    }

    fn advance(&self, state: &mut Self::State, flows: &[f64]) -> Result<Vec<f64>> {
        if flows.len() != self.num_params() {
            return Err(Error::dim("linear model input", self.num_params(), flows.len()));
        }
        state.push_front(DVector::from_column_slice(flows));
        state.truncate(self.lags.len());
        let mut y = DVector::zeros(self.num_measurements());
        for (a, x) in self.lags.iter().zip(state.iter()) {
            y += a * x;
        }
        self.counter.fetch_add(1, Ordering::Relaxed);
        Ok(y.iter().copied().collect())
    }

    fn intervals_simulated(&self) -> u64 {
        self.counter.load(Ordering::Relaxed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{delay_network, DelayLayout, SimConfig};

    #[test]
    fn linear_model_applies_lags() {
        let a0 = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let a1 = DMatrix::from_row_slice(1, 2, &[0.0, 2.0]);
        let model = LinearModel::new(vec![a0, a1]).unwrap();
        let out = model.run(&model.initial_state(), &[vec![3.0, 5.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(out, vec![vec![3.0], vec![11.0]]);
        assert_eq!(model.intervals_simulated(), 2);
    }

    #[test]
    fn simulator_model_uses_vehicles_per_interval() {
        let sim = Simulator::new(delay_network(DelayLayout::OriginLinks).unwrap(), SimConfig::default()).unwrap();
        let model = SimulatorModel::new(sim);
        let out = model.run(&model.initial_state(), &[vec![30.0, 20.0]]).unwrap();
        assert_eq!(out, vec![vec![30.0, 20.0]]);
        assert_eq!(model.to_flows(&[360.0]), vec![30.0]);
    }
}

//! Linear test cases and an independent dense Kalman filter.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use odcal::calibration::{CalibrationInputs, LinearModel, OnlineConfig, TrafficModel};
use odcal::filter::ConstraintMode;
use odcal::statespace::{ARTransitionModel, HistoricalProfile, MeasurementNoiseModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub struct LinearCase {
    pub model: LinearModel,
    pub inputs: CalibrationInputs,
    pub truth: Vec<Vec<f64>>,
    pub observed: Vec<Vec<f64>>,
}

pub fn random_matrix(rng: &mut ChaCha8Rng, m: usize, n: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(m, n, |_, _| scale * rng.random::<f64>())
}

/// Flows around 100 veh/interval with AR(1) deviations, seen through a
/// distributed-lag linear map plus Gaussian noise.
pub fn linear_case(seed: u64, n: usize, m: usize, lags: usize, horizon: usize) -> LinearCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mats: Vec<DMatrix<f64>> = (0..lags).map(|k| random_matrix(&mut rng, m, n, 1.0 / (k + 1) as f64)).collect();
    let model = LinearModel::new(mats).unwrap();
    let hist: Vec<Vec<f64>> = (0..horizon)
        .map(|_| (0..n).map(|_| 80.0 + 40.0 * rng.random::<f64>()).collect())
        .collect();
    let (a, q, r): (f64, f64, f64) = (0.6, 16.0, 4.0);
    let shock = Normal::new(0.0, q.sqrt()).unwrap();
    let noise = Normal::new(0.0, r.sqrt()).unwrap();
    let mut dev = vec![0.0; n];
    let truth: Vec<Vec<f64>> = hist
        .iter()
        .map(|h| {
            dev = dev.iter().map(|d| a * d + shock.sample(&mut rng)).collect();
            h.iter().zip(&dev).map(|(x, d)| x + d).collect()
        })
        .collect();
    let clean = model.run(&model.initial_state(), &truth).unwrap();
    let observed = clean
        .iter()
        .map(|y| y.iter().map(|v| v + noise.sample(&mut rng)).collect())
        .collect();
    let yh = model.run(&model.initial_state(), &hist).unwrap();
    let inputs = CalibrationInputs {
        historical: HistoricalProfile::new(hist, yh).unwrap(),
        ar: ARTransitionModel::from_scalars(&[a], n, q).unwrap(),
        noise: MeasurementNoiseModel::new(vec![r; m]).unwrap(),
    };
    LinearCase {
        model,
        inputs,
        truth,
        observed,
    }
}

pub fn exact_config(degree: usize) -> OnlineConfig {
    let mut cfg = OnlineConfig::default();
    cfg.filter.degree = degree;
    cfg.filter.constraint_mode = ConstraintMode::Unconstrained;
    cfg.filter.gain_regularization = 0.0;
    cfg.keep_posteriors = true;
    cfg
}

/// Textbook Kalman filter on the stacked state `[dx_t; ...; dx_{t-r+1}]`,
/// built directly from the lag matrices.
pub fn dense_kalman(case: &LinearCase, degree: usize) -> Vec<(DVector<f64>, DMatrix<f64>)> {
    let n = case.model.num_params();
    let m = case.model.num_measurements();
    let len = n * degree;
    let a = case.inputs.ar.scalar_coefficients().unwrap()[0];
    let q = case.inputs.ar.noise_variance_q();
    let mut f = DMatrix::zeros(len, len);
    for i in 0..n {
        f[(i, i)] = a;
    }
    for i in n..len {
        f[(i, i - n)] = 1.0;
    }
    let mut big_q = DMatrix::zeros(len, len);
    for i in 0..n {
        big_q[(i, i)] = q;
    }
    let big_r = DMatrix::from_diagonal(&DVector::from_column_slice(case.inputs.noise.variances()));
    let mut x = DVector::zeros(len);
    let mut p = DMatrix::identity(len, len) * q;
    let mut out = Vec::new();
    for (t, y) in case.observed.iter().enumerate() {
        x = &f * &x;
        p = &f * &p * f.transpose() + &big_q;
        let mut h = DMatrix::zeros(m, len);
        for (k, lag) in case.model.lags().iter().enumerate().take(degree) {
            if k <= t {
                h.view_mut((0, k * n), (m, n)).copy_from(lag);
            }
        }
        let z = DVector::from_column_slice(y) - DVector::from_column_slice(case.inputs.historical.measurements(t));
        let s = &h * &p * h.transpose() + &big_r;
        let k = &p * h.transpose() * s.try_inverse().unwrap();
        x = &x + &k * (z - &h * &x);
        p = &p - &k * &h * &p;
        p = (&p + p.transpose()) * 0.5;
        out.push((x.clone(), p.clone()));
    }
    out
}

/// Largest absolute difference relative to the largest entry of `b` (at least 1).
pub fn max_rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1.0)
}

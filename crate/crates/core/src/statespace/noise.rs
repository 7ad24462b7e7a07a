//! Measurement- and process-noise estimation from training residuals.

use super::{ARTransitionModel, MeasurementNoiseModel};
use crate::error::{Error, Result};

/// Per-sensor mean squared residual over all days and intervals
/// (`residuals[day][interval][sensor]`). Non-finite entries count as missing.
/// Sensors with zero variance come back flagged exact.
pub fn estimate_r(residuals: &[Vec<Vec<f64>>]) -> Result<MeasurementNoiseModel> {
    let m = residuals
        .iter()
        .flat_map(|d| d.iter())
        .map(Vec::len)
        .max()
        .unwrap_or(0);
    let mut sums = vec![0.0; m];
    let mut counts = vec![0usize; m];
    for row in residuals.iter().flatten() {
        for (i, e) in row.iter().enumerate() {
            if e.is_finite() {
                sums[i] += e * e;
                counts[i] += 1;
            }
        }
    }
    if m == 0 {
        return Err(Error::EmptyResiduals { sensor: 0 });
    }
    if let Some(sensor) = counts.iter().position(|c| *c == 0) {
        return Err(Error::EmptyResiduals { sensor });
    }
    MeasurementNoiseModel::with_exact(sums.iter().zip(&counts).map(|(s, c)| s / *c as f64).collect())
}

/// Pooled mean squared one-step transition residual
/// (`states[day][interval][od]`, deviations from history). Intervals without
/// a full lag history are skipped.
pub fn estimate_q(states: &[Vec<Vec<f64>>], trans: &ARTransitionModel) -> Result<f64> {
    let p = trans.order();
    let n = trans.dim();
    let coeffs = trans.coefficient_matrices();
    let mut sum = 0.0;
    let mut count = 0usize;
    for day in states {
        if let Some(bad) = day.iter().find(|x| x.len() != n) {
            return Err(Error::dim("estimate_q series", n, bad.len()));
        }
        for h in p..day.len() {
            for i in 0..n {
                let mut pred = 0.0;
                for (k, f) in coeffs.iter().enumerate() {
                    let lag = &day[h - 1 - k];
                    pred += (0..n).map(|j| f[(i, j)] * lag[j]).sum::<f64>();
                }
                sum += (day[h][i] - pred).powi(2);
                count += 1;
            }
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn r_from_symmetric_pair() {
        let r = estimate_r(&[vec![vec![3.0], vec![-3.0]]]).unwrap();
        assert_eq!(r.variances(), &[9.0]);
    }

    #[test]
    fn r_zero_residuals_marks_exact() {
        let r = estimate_r(&[vec![vec![0.0, 1.0]; 4]]).unwrap();
        assert_eq!(r.variances()[0], 0.0);
        assert!(r.is_exact(0) && !r.is_exact(1));
    }

    #[test]
    fn r_from_four_residuals() {
        let r = estimate_r(&[vec![vec![1.0], vec![2.0]], vec![vec![3.0], vec![4.0]]]).unwrap();
        assert_eq!(r.variances(), &[7.5]);
    }

    #[test]
    fn r_missing_sensor_is_error() {
        let res = estimate_r(&[vec![vec![1.0, f64::NAN]]]);
        assert!(matches!(res, Err(Error::EmptyResiduals { sensor: 1 })));
        assert!(matches!(estimate_r(&[]), Err(Error::EmptyResiduals { .. })));
    }

    #[test]
    fn q_from_symmetric_pair() {
        let ar = ARTransitionModel::from_scalars(&[0.0], 1, 0.0).unwrap();
        let q = estimate_q(&[vec![vec![0.0], vec![2.0], vec![-2.0]]], &ar).unwrap();
        assert_eq!(q, 4.0);
    }

    #[test]
    fn q_zero_on_exact_recursion() {
        let ar = ARTransitionModel::from_scalars(&[0.5, 0.25], 2, 0.0).unwrap();
        let mut series = vec![vec![8.0, -4.0], vec![4.0, 2.0]];
        for h in 2..20 {
            let next = (0..2).map(|i| 0.5 * series[h - 1][i] + 0.25 * series[h - 2][i]).collect();
            series.push(next);
        }
        assert_eq!(estimate_q(&[series], &ar).unwrap(), 0.0);
    }

    #[test]
    fn q_recovers_known_noise() {
        let ar = ARTransitionModel::from_scalars(&[0.884, 0.0967], 3, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise = Normal::new(0.0, 17.6f64.sqrt()).unwrap();
        let mut days = Vec::new();
        for _ in 0..10 {
            let mut s = vec![vec![0.0; 3]; 2];
            for h in 2..400 {
                let next = (0..3)
                    .map(|i| 0.884 * s[h - 1][i] + 0.0967 * s[h - 2][i] + noise.sample(&mut rng))
                    .collect();
                s.push(next);
            }
            days.push(s);
        }
        let q = estimate_q(&days, &ar).unwrap();
        assert!((q / 17.6 - 1.0).abs() < 0.05, "q = {q}");
    }

    proptest! {
        #[test]
        fn r_matches_brute_force(data in prop::collection::vec(
            prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 3), 1..6), 1..4)) {
            let r = estimate_r(&data).unwrap();
            for i in 0..3 {
                let mut s = 0.0;
                let mut c = 0.0;
                for day in &data {
                    for row in day {
                        s += row[i] * row[i];
                        c += 1.0;
                    }
                }
                assert_abs_diff_eq!(r.variances()[i], s / c, epsilon = 1e-12 * (1.0 + s / c));
            }
        }

        #[test]
        fn q_matches_brute_force(
            data in prop::collection::vec(
                prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 2), 3..8), 1..4),
            a in -1.0f64..1.0, b in -1.0f64..1.0,
        ) {
            let ar = ARTransitionModel::from_scalars(&[a, b], 2, 0.0).unwrap();
            let q = estimate_q(&data, &ar).unwrap();
            let mut s = 0.0;
            let mut c = 0.0;
            for day in &data {
                for h in 2..day.len() {
                    for i in 0..2 {
                        let e = day[h][i] - a * day[h - 1][i] - b * day[h - 2][i];
                        s += e * e;
                        c += 1.0;
                    }
                }
            }
            assert_abs_diff_eq!(q, s / c, epsilon = 1e-10 * (1.0 + s / c));
        }
    }
}

//! Scalar-per-lag autoregressive fitting and AIC order selection.

use nalgebra::{DMatrix, DVector};

use super::ARTransitionModel;
use crate::error::{Error, Result};

/// Relative Cholesky pivot below which the normal equations count as singular.
const PIVOT_TOLERANCE: f64 = 1e-12;

/// Least-squares result for one order on one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ArFit {
    pub coefficients: Vec<f64>,
    pub rss: f64,
    pub count: usize,
}

impl ArFit {
    pub fn into_model(self, n: usize) -> Result<ARTransitionModel> {
        let q = if self.count == 0 { 0.0 } else { self.rss / self.count as f64 };
        ARTransitionModel::from_scalars(&self.coefficients, n, q)
    }
}

/// Fits AR(`order`) to a single series of OD vectors (`series[h][od]`).
pub fn fit_ar(series: &[Vec<f64>], order: usize) -> Result<ARTransitionModel> {
    fit_ar_pooled(std::slice::from_ref(&series.to_vec()), order)
}

/// Fits one scalar-per-lag AR model pooled over days and OD pairs
/// (`days[d][h][od]`). The residual variance becomes the process noise.
pub fn fit_ar_pooled(days: &[Vec<Vec<f64>>], order: usize) -> Result<ARTransitionModel> {
    let n = check_days(days)?;
    if order == 0 {
        return Err(Error::InvalidArgument("AR order must be at least 1".into()));
    }
    if !days.iter().any(|d| d.len() > order + 1) {
        return Err(Error::InvalidArgument(format!(
            "AR({order}) needs more than {} intervals",
            order + 1
        )));
    }
    least_squares(days, order, order)?.into_model(n)
}

/// Gaussian AIC `N ln(RSS/N) + 2k` of AR(`order`) fitted on the sample that
/// starts at interval `start`.
pub fn ar_aic(days: &[Vec<Vec<f64>>], order: usize, start: usize) -> Result<f64> {
    check_days(days)?;
    let fit = least_squares(days, order, start)?;
    if fit.count == 0 {
        return Err(Error::InvalidArgument("no samples left for AIC".into()));
    }
    let n = fit.count as f64;
    let energy: f64 = sample_targets(days, start).map(|y| y * y).sum();
    let rss = fit.rss.max(1e-20 * energy).max(f64::MIN_POSITIVE);
    Ok(n * (rss / n).ln() + 2.0 * order as f64)
}

/// AIC order on a single series.
pub fn select_ar_order(series: &[Vec<f64>], max_order: usize) -> Result<usize> {
    select_ar_order_pooled(std::slice::from_ref(&series.to_vec()), max_order)
}

/// AIC order pooled over days. All orders share the sample starting at
/// `max_order` so their likelihoods are comparable; ties go to the smaller
/// order.
pub fn select_ar_order_pooled(days: &[Vec<Vec<f64>>], max_order: usize) -> Result<usize> {
    if max_order == 0 {
        return Err(Error::InvalidArgument("max_order must be at least 1".into()));
    }
    let mut best = (1, f64::INFINITY);
    for order in 1..=max_order {
        let aic = match ar_aic(days, order, max_order) {
            // Extra lags are collinear when a lower order already explains
            // the series exactly; such orders cannot win.
            Err(Error::DegenerateFit { .. }) if order > 1 => {
                log::debug!("AR({order}) is degenerate, skipped in order selection");
                continue;
            }
            other => other?,
        };
        if aic < best.1 {
            best = (order, aic);
        }
    }
    Ok(best.0)
}

fn check_days(days: &[Vec<Vec<f64>>]) -> Result<usize> {
    let n = days
        .iter()
        .flat_map(|d| d.first())
        .map(Vec::len)
        .next()
        .ok_or_else(|| Error::InvalidArgument("empty AR series".into()))?;
    for day in days {
        if let Some(bad) = day.iter().find(|x| x.len() != n) {
            return Err(Error::dim("AR series", n, bad.len()));
        }
        if day.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("AR series has gaps or non-finite values".into()));
        }
    }
    Ok(n)
}

fn sample_targets(days: &[Vec<Vec<f64>>], start: usize) -> impl Iterator<Item = f64> + '_ {
    days.iter()
        .flat_map(move |d| d.iter().skip(start))
        .flat_map(|x| x.iter().copied())
}

fn least_squares(days: &[Vec<Vec<f64>>], order: usize, start: usize) -> Result<ArFit> {
    let start = start.max(order);
    let mut gram = DMatrix::<f64>::zeros(order, order);
    let mut cross = DVector::<f64>::zeros(order);
    let mut count = 0usize;
    let mut lags = vec![0.0; order];
    for day in days {
        for h in start..day.len() {
            for i in 0..day[h].len() {
                for (k, lag) in lags.iter_mut().enumerate() {
                    *lag = day[h - 1 - k][i];
                }
                let y = day[h][i];
                for a in 0..order {
                    cross[a] += lags[a] * y;
                    for b in 0..order {
                        gram[(a, b)] += lags[a] * lags[b];
                    }
                }
                count += 1;
            }
        }
    }
    let scale = (0..order).map(|i| gram[(i, i)]).fold(0.0, f64::max);
    let chol = gram.clone().cholesky().ok_or(Error::DegenerateFit { order })?;
    let l = chol.l();
    let degenerate = scale == 0.0 || (0..order).any(|i| l[(i, i)] * l[(i, i)] <= PIVOT_TOLERANCE * scale);
    if degenerate {
        return Err(Error::DegenerateFit { order });
    }
    let beta = chol.solve(&cross);
    let mut rss = 0.0;
    for day in days {
        for h in start..day.len() {
            for i in 0..day[h].len() {
                let pred: f64 = (0..order).map(|k| beta[k] * day[h - 1 - k][i]).sum();
                rss += (day[h][i] - pred).powi(2);
            }
        }
    }
    Ok(ArFit {
        coefficients: beta.iter().copied().collect(),
        rss,
        count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn simulate_ar(coeffs: &[f64], var: f64, steps: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, var.sqrt()).unwrap();
        let burn = 200;
        let mut x = vec![0.0; steps + burn];
        for h in 0..x.len() {
            let mut v = noise.sample(&mut rng);
            for (k, a) in coeffs.iter().enumerate() {
                if h > k {
                    v += a * x[h - 1 - k];
                }
            }
            x[h] = v;
        }
        x[burn..].iter().map(|v| vec![*v]).collect()
    }

    /// Least squares through a QR factorisation of the explicit design matrix.
    fn qr_oracle(series: &[Vec<f64>], order: usize, start: usize) -> (Vec<f64>, f64, usize) {
        let rows = series.len() - start;
        let design = DMatrix::from_fn(rows, order, |r, k| series[start + r - 1 - k][0]);
        let target = DVector::from_fn(rows, |r, _| series[start + r][0]);
        let qr = design.clone().qr();
        let rhs = qr.q().transpose() * &target;
        let beta = qr.r().solve_upper_triangular(&rhs).unwrap();
        let resid = target - design * &beta;
        (beta.iter().copied().collect(), resid.norm_squared(), rows)
    }

    /// 100 seeded AR(2) series of 5000 steps. Single-trial errors have a
    /// 95th percentile near 0.031 and a maximum near 0.045 over 200 seeds,
    /// so each trial is held to 0.05 and the ensemble mean to 0.03.
    #[test]
    fn recovers_ar2_coefficients_and_noise() {
        let trials = 100;
        let mut mean = [0.0; 2];
        for seed in 0..trials {
            let series = simulate_ar(&[0.884, 0.0967], 17.6, 5000, seed);
            let model = fit_ar(&series, 2).unwrap();
            let c = model.scalar_coefficients().unwrap();
            assert_abs_diff_eq!(c[0], 0.884, epsilon = 0.05);
            assert_abs_diff_eq!(c[1], 0.0967, epsilon = 0.05);
            assert!((model.noise_variance_q() / 17.6 - 1.0).abs() < 0.05);
            mean[0] += c[0] / trials as f64;
            mean[1] += c[1] / trials as f64;
        }
        assert_abs_diff_eq!(mean[0], 0.884, epsilon = 0.03);
        assert_abs_diff_eq!(mean[1], 0.0967, epsilon = 0.03);
    }

    #[test]
    fn matches_qr_oracle() {
        let series = simulate_ar(&[0.6, -0.2, 0.1], 2.0, 300, 3);
        for order in 1..=4 {
            let fit = least_squares(&[series.clone()], order, order).unwrap();
            let (beta, rss, count) = qr_oracle(&series, order, order);
            assert_eq!(fit.count, count);
            for (a, b) in fit.coefficients.iter().zip(&beta) {
                assert_abs_diff_eq!(*a, *b, epsilon = 1e-10);
            }
            assert_abs_diff_eq!(fit.rss, rss, epsilon = 1e-8 * rss);
        }
    }

    #[test]
    fn noiseless_ar1_is_exact() {
        let series: Vec<Vec<f64>> = (0..40).map(|h| vec![100.0 * 0.5f64.powi(h)]).collect();
        let model = fit_ar(&series, 1).unwrap();
        assert_abs_diff_eq!(model.scalar_coefficients().unwrap()[0], 0.5, epsilon = 1e-12);
        assert!(model.noise_variance_q() < 1e-20);
    }

    #[test]
    fn constant_series_ar1_gives_unit_coefficient() {
        let series = vec![vec![4.0, 4.0]; 10];
        let model = fit_ar(&series, 1).unwrap();
        assert_abs_diff_eq!(model.scalar_coefficients().unwrap()[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn constant_series_ar2_is_degenerate() {
        let series = vec![vec![4.0]; 10];
        assert!(matches!(fit_ar(&series, 2), Err(Error::DegenerateFit { order: 2 })));
    }

    #[test]
    fn too_short_series_rejected() {
        let series = vec![vec![1.0]; 3];
        assert!(fit_ar(&series, 2).is_err());
    }

    #[test]
    fn deterministic_ar1_selects_order_one() {
        let series: Vec<Vec<f64>> = (0..60).map(|h| vec![50.0 * 0.9f64.powi(h)]).collect();
        assert_eq!(select_ar_order(&series, 5).unwrap(), 1);
    }

    #[test]
    fn white_noise_selects_order_one() {
        let series = simulate_ar(&[], 1.0, 5000, 11);
        assert_eq!(select_ar_order(&series, 5).unwrap(), 1);
    }

    /// Order selection over 100 seeded AR(2) series of 5000 steps.
    ///
    /// The oracle recomputes every AIC value through QR and picks the
    /// minimum independently. The selection rate is frozen from that oracle:
    /// AIC keeps an extra lag with probability about P(chi2_1 > 2) per lag,
    /// so roughly a quarter of the trials land above order 2.
    #[test]
    fn aic_selection_rate_on_ar2_data() {
        let max_order = 5;
        let mut hits = 0;
        for seed in 0..100 {
            let series = simulate_ar(&[0.884, 0.0967], 17.6, 5000, 1000 + seed);
            let picked = select_ar_order(&series, max_order).unwrap();
            let energy: f64 = series[max_order..].iter().map(|x| x[0] * x[0]).sum();
            let oracle = (1..=max_order)
                .map(|k| {
                    let (_, rss, n) = qr_oracle(&series, k, max_order);
                    let n = n as f64;
                    (k, n * (rss.max(1e-20 * energy) / n).ln() + 2.0 * k as f64)
                })
                .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
                .0;
            assert_eq!(picked, oracle, "seed {seed}");
            hits += usize::from(picked == 2);
        }
        assert_eq!(hits, AIC_HITS_FROZEN);
    }

    const AIC_HITS_FROZEN: usize = 76;

    #[test]
    fn pooled_fit_uses_all_days() {
        let a = simulate_ar(&[0.7], 1.0, 400, 1);
        let b = simulate_ar(&[0.7], 1.0, 400, 2);
        let pooled = least_squares(&[a.clone(), b.clone()], 1, 1).unwrap();
        let fa = least_squares(&[a], 1, 1).unwrap();
        let fb = least_squares(&[b], 1, 1).unwrap();
        assert_eq!(pooled.count, fa.count + fb.count);
        assert!(pooled.rss <= fa.rss + fb.rss + 1e-6 + (fa.rss + fb.rss) * 0.05);
    }
}

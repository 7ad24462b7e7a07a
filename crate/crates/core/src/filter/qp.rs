//! Bound-constrained projection in the posterior metric.
//!
//! Solves `min (z - m)^T P^{-1} (z - m)` subject to `z >= l` with a primal
//! active-set method. With the working set `W` held at its bounds the free
//! block has the closed form `z_F = m_F + P_FW P_WW^{-1} (l_W - m_W)` and the
//! multipliers are `P_WW^{-1} (l_W - m_W)`, so `P^{-1}` is never formed.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{spd_solve_vec, sub_matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub z: DVector<f64>,
    pub active: Vec<usize>,
    pub iterations: usize,
    pub kkt_residual: f64,
}

/// Solves the bound QP. Entries of `lower` may be `-inf`.
pub fn solve_bound_qp(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    lower: &DVector<f64>,
    tolerance: f64,
    max_iterations: usize,
) -> Result<QpSolution> {
    let len = mean.len();
    if cov.nrows() != len || cov.ncols() != len {
        return Err(Error::dim("bound QP covariance", len, cov.nrows()));
    }
    if lower.len() != len {
        return Err(Error::dim("bound QP lower bounds", len, lower.len()));
    }
    if (0..len).all(|i| mean[i] >= lower[i]) {
        return Ok(QpSolution {
            z: mean.clone(),
            active: Vec::new(),
            iterations: 0,
            kkt_residual: 0.0,
        });
    }

    let scale = |i: usize| tolerance * (1.0 + mean[i].abs().max(lower[i].abs()));
    let mut in_set = vec![false; len];
    let mut z = mean.clone();
    for i in 0..len {
        if mean[i] < lower[i] {
            z[i] = lower[i];
            in_set[i] = true;
        }
    }

    let mut worst = f64::INFINITY;
    for iteration in 1..=max_iterations {
        let working: Vec<usize> = (0..len).filter(|&i| in_set[i]).collect();
        let (target, multipliers) = equality_optimum(mean, cov, lower, &working)?;
        let step = &target - &z;

        let mut alpha = 1.0;
        let mut blocking = None;
        for i in 0..len {
            if !in_set[i] && step[i] < 0.0 && lower[i].is_finite() {
                let room = (lower[i] - z[i]) / step[i];
                if room < alpha {
                    alpha = room.max(0.0);
                    blocking = Some(i);
                }
            }
        }

        if let Some(i) = blocking {
            z += step * alpha;
            z[i] = lower[i];
            in_set[i] = true;
            continue;
        }
        z = target;
        for &i in &working {
            z[i] = lower[i];
        }

        let most_negative = working
            .iter()
            .zip(multipliers.iter())
            .filter(|(&i, &mu)| mu < -scale(i))
            .min_by(|a, b| a.1.total_cmp(b.1));
        match most_negative {
            Some((&i, _)) => in_set[i] = false,
            None => {
                worst = kkt_residual(&z, lower, &working, &multipliers);
                if worst <= tolerance * (1.0 + z.amax()) {
                    return Ok(QpSolution {
                        z,
                        active: working,
                        iterations: iteration,
                        kkt_residual: worst,
                    });
                }
            }
        }
    }
    Err(Error::QpNonConvergence {
        iterations: max_iterations,
        residual: worst,
    })
}

/// Minimiser with `z_W = l_W` and the matching multipliers.
fn equality_optimum(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    lower: &DVector<f64>,
    working: &[usize],
) -> Result<(DVector<f64>, DVector<f64>)> {
    if working.is_empty() {
        return Ok((mean.clone(), DVector::zeros(0)));
    }
    let all: Vec<usize> = (0..mean.len()).collect();
    let p_ww = sub_matrix(cov, working, working);
    let gap = DVector::from_iterator(working.len(), working.iter().map(|&i| lower[i] - mean[i]));
    let multipliers = spd_solve_vec(&p_ww, &gap).ok_or(Error::QpNonConvergence {
        iterations: 0,
        residual: f64::INFINITY,
    })?;
    let p_aw = sub_matrix(cov, &all, working);
    Ok((mean + p_aw * &multipliers, multipliers))
}

fn kkt_residual(z: &DVector<f64>, lower: &DVector<f64>, working: &[usize], multipliers: &DVector<f64>) -> f64 {
    let primal = (0..z.len())
        .filter(|&i| lower[i].is_finite())
        .map(|i| (lower[i] - z[i]).max(0.0))
        .fold(0.0, f64::max);
    let dual = multipliers.iter().map(|mu| (-mu).max(0.0)).fold(0.0, f64::max);
    let complementarity = working
        .iter()
        .map(|&i| (z[i] - lower[i]).abs())
        .fold(0.0, f64::max);
    primal.max(dual).max(complementarity)
}

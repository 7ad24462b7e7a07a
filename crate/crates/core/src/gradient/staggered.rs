//! Staggered horizons: each interval perturbs only its own parameters and
//! simulates ahead over the augmentation window, so every block is computed
//! once and reused by later intervals.

use nalgebra::DMatrix;

use super::JacobianSet;
use crate::error::{Error, Result};

/// One perturbation sweep: perturb the parameters of `perturbed_interval`
/// and record sensor outputs over `first..=last`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SweepPlan {
    pub perturbed_interval: usize,
    pub first: usize,
    pub last: usize,
}

impl SweepPlan {
    pub fn len(&self) -> usize {
        self.last + 1 - self.first
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Blocks `(measurement interval, parameter interval)` the sweep yields.
    pub fn blocks(&self) -> Vec<(usize, usize)> {
        (self.first..=self.last).map(|h| (h, self.perturbed_interval)).collect()
    }
}

/// Sweep for interval `t` with degree `degree`, clipped to `horizon`
/// intervals when given.
pub fn staggered_plan(t: usize, degree: usize, horizon: Option<usize>) -> SweepPlan {
    let mut last = t + degree.max(1) - 1;
    if let Some(h) = horizon {
        last = last.min(h.saturating_sub(1)).max(t);
    }
    SweepPlan {
        perturbed_interval: t,
        first: t,
        last,
    }
}

/// Blocks the calibration row for interval `t` touches over its window:
/// `H_j^i` for `w <= i <= j <= t`, `w = max(0, t - r + 1)`.
pub fn row_requirements(t: usize, degree: usize) -> Vec<(usize, usize)> {
    let w = (t + 1).saturating_sub(degree.max(1));
    let mut out = Vec::new();
    for j in w..=t {
        for i in w..=j {
            out.push((j, i));
        }
    }
    out
}

/// Block cache plus the sweep policy.
#[derive(Debug, Clone)]
pub struct StaggeredSchedule {
    degree: usize,
    horizon: usize,
    recompute: bool,
    cache: JacobianSet,
    sweeps_run: usize,
}

impl StaggeredSchedule {
    pub fn new(degree: usize, horizon: usize, recompute: bool) -> Result<Self> {
        if degree == 0 {
            return Err(Error::InvalidArgument("degree must be >= 1".into()));
        }
        Ok(Self {
            degree,
            horizon,
            recompute,
            cache: JacobianSet::new(),
            sweeps_run: 0,
        })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn cache(&self) -> &JacobianSet {
        &self.cache
    }

    pub fn sweeps_run(&self) -> usize {
        self.sweeps_run
    }

    /// Sweeps needed before calibrating interval `t`. Normally only the
    /// newest parameters are perturbed; with `recompute` every interval in
    /// the window is re-swept up to `t`.
    pub fn sweeps_for(&self, t: usize) -> Vec<SweepPlan> {
        let w = (t + 1).saturating_sub(self.degree);
        if self.recompute {
            return (w..=t)
                .map(|k| SweepPlan {
                    perturbed_interval: k,
                    first: k,
                    last: t,
                })
                .collect();
        }
        let plan = staggered_plan(t, self.degree, Some(self.horizon));
        let missing = plan.blocks().iter().any(|&(h, k)| !self.cache.contains(h, k));
        if missing {
            vec![plan]
        } else {
            Vec::new()
        }
    }

    /// Stores a sweep's stacked Jacobian (`len * m` rows, newest interval
    /// first in time order) as individual blocks.
    pub fn record(&mut self, plan: &SweepPlan, stacked: &DMatrix<f64>) -> Result<()> {
        let len = plan.len();
        if stacked.nrows() % len != 0 {
            return Err(Error::dim("stacked sweep jacobian", len, stacked.nrows()));
        }
        let m = stacked.nrows() / len;
        for (b, h) in (plan.first..=plan.last).enumerate() {
            let block = stacked.view((b * m, 0), (m, stacked.ncols())).into_owned();
            self.cache.insert(h, plan.perturbed_interval, block)?;
        }
        self.sweeps_run += 1;
        let oldest = (plan.perturbed_interval + 1).saturating_sub(2 * self.degree);
        self.cache.evict_before(oldest);
        Ok(())
    }

    pub fn theta(&self, t: usize, m: usize, n: usize) -> Result<DMatrix<f64>> {
        self.cache.theta(t, self.degree, m, n)
    }

    /// Whether every block of the interval-`t` calibration row is cached.
    pub fn row_ready(&self, t: usize) -> bool {
        row_requirements(t, self.degree)
            .iter()
            .all(|&(h, k)| self.cache.contains(h, k))
    }
}

//! Jacobian estimation: central finite differences, partitioned
//! simultaneous perturbation over a graph coloring, and the staggered
//! schedule for augmented states.

mod coloring;
mod staggered;

pub use coloring::{
    conflict_degree_stats, multi_start_color, sequential_color, ColorAssignment, IncidenceMatrix,
};
pub use staggered::{row_requirements, staggered_plan, StaggeredSchedule, SweepPlan};

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    #[default]
    Fd,
    Psp,
}

/// A Jacobian estimate and the number of model evaluations it cost.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianEstimate {
    pub matrix: DMatrix<f64>,
    pub evaluations: usize,
}

/// Central differences, `2n` evaluations run concurrently.
///
/// `eval` must be callable from several threads at once.
pub fn fd_jacobian<F>(eval: F, point: &[f64], steps: &[f64]) -> Result<JacobianEstimate>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    if steps.len() != point.len() {
        return Err(Error::dim("finite-difference steps", point.len(), steps.len()));
    }
    if let Some(j) = steps.iter().position(|d| !(*d > 0.0)) {
        return Err(Error::InvalidArgument(format!("step for parameter {j} must be > 0")));
    }
    let directions: Vec<Vec<(usize, f64)>> = (0..point.len()).map(|j| vec![(j, steps[j])]).collect();
    let columns = paired_differences(&eval, point, &directions)?;
    let m = columns.first().map_or(0, DVector::len);
    Ok(JacobianEstimate {
        matrix: assemble(m, &columns),
        evaluations: 2 * point.len(),
    })
}

/// Simultaneous perturbation of each color group, `2p` evaluations, then
/// inflation back to `m x n` through the incidence mask.
pub fn psp_jacobian<F>(
    eval: F,
    point: &[f64],
    coloring: &ColorAssignment,
    incidence: &IncidenceMatrix,
    steps: &[f64],
) -> Result<JacobianEstimate>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    if coloring.num_params() != point.len() {
        return Err(Error::dim("coloring size", point.len(), coloring.num_params()));
    }
    if steps.len() != coloring.num_colors() {
        return Err(Error::dim("perturbation steps per color", coloring.num_colors(), steps.len()));
    }
    if let Some(k) = steps.iter().position(|d| !(*d > 0.0)) {
        return Err(Error::InvalidArgument(format!("step for color {k} must be > 0")));
    }
    coloring.validate(incidence)?;
    let directions: Vec<Vec<(usize, f64)>> = coloring
        .groups()
        .into_iter()
        .zip(steps)
        .map(|(g, &d)| g.into_iter().map(|j| (j, d)).collect())
        .collect();
    let columns = paired_differences(&eval, point, &directions)?;
    if incidence.nrows() != columns.first().map_or(incidence.nrows(), DVector::len) {
        return Err(Error::dim("incidence rows", columns[0].len(), incidence.nrows()));
    }
    let condensed = assemble(incidence.nrows(), &columns);
    Ok(JacobianEstimate {
        matrix: inflate(&condensed, coloring, incidence)?,
        evaluations: 2 * coloring.num_colors(),
    })
}

/// `(g(x + d) - g(x - d)) / (2 delta)` for each direction, where a direction
/// lists the perturbed parameters and their common step.
fn paired_differences<F>(eval: &F, point: &[f64], directions: &[Vec<(usize, f64)>]) -> Result<Vec<DVector<f64>>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    let tasks: Vec<(usize, f64)> = (0..directions.len()).flat_map(|k| [(k, 1.0), (k, -1.0)]).collect();
    let outputs: Vec<Vec<f64>> = tasks
        .par_iter()
        .map(|&(k, sign)| {
            let mut x = point.to_vec();
            for &(j, d) in &directions[k] {
                x[j] += sign * d;
            }
            let y = eval(&x)?;
            let culprit = directions[k].first().map_or(k, |e| e.0);
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { parameter: culprit });
            }
            Ok(y)
        })
        .collect::<Result<_>>()?;
    directions
        .iter()
        .enumerate()
        .map(|(k, dir)| {
            let (plus, minus) = (&outputs[2 * k], &outputs[2 * k + 1]);
            if plus.len() != minus.len() || plus.len() != outputs[0].len() {
                return Err(Error::dim("model output", outputs[0].len(), plus.len()));
            }
            let delta = dir.first().map_or(1.0, |e| e.1);
            Ok(DVector::from_iterator(
                plus.len(),
                plus.iter().zip(minus).map(|(a, b)| (a - b) / (2.0 * delta)),
            ))
        })
        .collect()
}

fn assemble(m: usize, columns: &[DVector<f64>]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(m, columns.len());
    for (j, c) in columns.iter().enumerate() {
        out.set_column(j, c);
    }
    out
}

/// `H D`: sums the columns of each color.
pub fn condense(h: &DMatrix<f64>, coloring: &ColorAssignment) -> Result<DMatrix<f64>> {
    if h.ncols() != coloring.num_params() {
        return Err(Error::dim("condense", coloring.num_params(), h.ncols()));
    }
    let mut out = DMatrix::zeros(h.nrows(), coloring.num_colors());
    for j in 0..h.ncols() {
        let c = coloring.color_of(j);
        for i in 0..h.nrows() {
            out[(i, c)] += h[(i, j)];
        }
    }
    Ok(out)
}

/// `(H~ D^T) o H_inc`: copies each condensed entry back to the one
/// parameter of that color the incidence allows in the row.
pub fn inflate(
    condensed: &DMatrix<f64>,
    coloring: &ColorAssignment,
    incidence: &IncidenceMatrix,
) -> Result<DMatrix<f64>> {
    if condensed.ncols() != coloring.num_colors() {
        return Err(Error::dim("inflate colors", coloring.num_colors(), condensed.ncols()));
    }
    if condensed.nrows() != incidence.nrows() {
        return Err(Error::dim("inflate rows", incidence.nrows(), condensed.nrows()));
    }
    coloring.validate(incidence)?;
    let mut out = DMatrix::zeros(incidence.nrows(), incidence.ncols());
    for i in 0..incidence.nrows() {
        for &j in incidence.row(i) {
            out[(i, j)] = condensed[(i, coloring.color_of(j))];
        }
    }
    Ok(out)
}

/// Union of the non-zero patterns (magnitude above `threshold`) of equally
/// shaped Jacobians.
pub fn detect_incidence<'a, I>(jacobians: I, threshold: f64) -> Result<IncidenceMatrix>
where
    I: IntoIterator<Item = &'a DMatrix<f64>>,
{
    let mut iter = jacobians.into_iter();
    let first = iter
        .next()
        .ok_or_else(|| Error::InvalidArgument("no Jacobians recorded".into()))?;
    let mut acc = IncidenceMatrix::from_dense(first, threshold);
    for h in iter {
        acc = acc.union(&IncidenceMatrix::from_dense(h, threshold))?;
    }
    Ok(acc)
}

/// Blocks `H_h^k` keyed by (measurement interval, parameter interval).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct JacobianSet {
    blocks: BTreeMap<(usize, usize), DMatrix<f64>>,
    shape: Option<(usize, usize)>,
}

impl JacobianSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, measurement_interval: usize, parameter_interval: usize, block: DMatrix<f64>) -> Result<()> {
        let shape = (block.nrows(), block.ncols());
        match self.shape {
            Some(s) if s != shape => return Err(Error::dim("jacobian block", s.0 * s.1, shape.0 * shape.1)),
            _ => self.shape = Some(shape),
        }
        if block.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite jacobian block ({measurement_interval}, {parameter_interval})"
            )));
        }
        self.blocks.insert((measurement_interval, parameter_interval), block);
        Ok(())
    }

    pub fn get(&self, measurement_interval: usize, parameter_interval: usize) -> Option<&DMatrix<f64>> {
        self.blocks.get(&(measurement_interval, parameter_interval))
    }

    pub fn contains(&self, measurement_interval: usize, parameter_interval: usize) -> bool {
        self.blocks.contains_key(&(measurement_interval, parameter_interval))
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn blocks(&self) -> impl Iterator<Item = (&(usize, usize), &DMatrix<f64>)> {
        self.blocks.iter()
    }

    /// Drops blocks whose parameter interval is older than `oldest`.
    pub fn evict_before(&mut self, oldest: usize) {
        self.blocks.retain(|(_, k), _| *k >= oldest);
    }

    /// `[H_h^h, H_h^{h-1}, ..., H_h^{h-r+1}]`; blocks before the first
    /// interval are zero. Missing in-range blocks are an error.
    pub fn theta(&self, h: usize, degree: usize, m: usize, n: usize) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(m, degree * n);
        for b in 0..degree {
            let Some(k) = h.checked_sub(b) else { break };
            let block = self.get(h, k).ok_or_else(|| {
                Error::InvalidArgument(format!("jacobian block H_{h}^{k} has not been computed"))
            })?;
            if block.nrows() != m || block.ncols() != n {
                return Err(Error::dim("theta block", m * n, block.nrows() * block.ncols()));
            }
            out.view_mut((0, b * n), (m, n)).copy_from(block);
        }
        Ok(out)
    }
}

/// Simulated-interval counters for one calibration interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct EvaluationCounters {
    /// Model evaluations used for Jacobians.
    pub gradient_evaluations: usize,
    /// Intervals simulated inside those evaluations.
    pub gradient_intervals: usize,
    /// Intervals simulated for the nominal replay at the prior.
    pub nominal_intervals: usize,
    /// Intervals simulated to move the stored window snapshot forward.
    pub advance_intervals: usize,
    /// Intervals simulated for estimates and predictions only.
    pub prediction_intervals: usize,
}

impl EvaluationCounters {
    /// Intervals that count against the calibration budget.
    pub fn calibration_intervals(&self) -> usize {
        self.gradient_intervals + self.nominal_intervals + self.advance_intervals
    }

    pub fn accumulate(&mut self, other: &Self) {
        self.gradient_evaluations += other.gradient_evaluations;
        self.gradient_intervals += other.gradient_intervals;
        self.nominal_intervals += other.nominal_intervals;
        self.advance_intervals += other.advance_intervals;
        self.prediction_intervals += other.prediction_intervals;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn cyclic_six() -> IncidenceMatrix {
        IncidenceMatrix::from_rows((0..6).map(|i| vec![(i + 5) % 6, i, (i + 1) % 6]).collect(), 6).unwrap()
    }

    #[test]
    fn fd_on_linear_map_is_exact() {
        let a = DMatrix::from_row_slice(2, 3, &[1.0, -2.0, 0.5, 0.0, 3.0, 4.0]);
        let f = |x: &[f64]| Ok((&a * DVector::from_column_slice(x)).iter().copied().collect());
        let j = fd_jacobian(f, &[1.0, 2.0, 3.0], &[0.1, 0.2, 0.3]).unwrap();
        assert_abs_diff_eq!(j.matrix, a, epsilon = 1e-12);
        assert_eq!(j.evaluations, 6);
    }

    #[test]
    fn fd_of_square() {
        let j = fd_jacobian(|x: &[f64]| Ok(vec![x[0] * x[0]]), &[3.0], &[1e-3]).unwrap();
        assert_abs_diff_eq!(j.matrix[(0, 0)], 6.0, epsilon = 1e-6);
    }

    #[test]
    fn fd_non_finite_names_parameter() {
        let f = |x: &[f64]| Ok(vec![if x[1] > 1.0 { f64::NAN } else { 0.0 }]);
        let err = fd_jacobian(f, &[0.0, 1.0], &[0.5, 0.5]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { parameter: 1 }));
    }

    #[test]
    fn fd_and_psp_call_counts() {
        let inc = cyclic_six();
        let coloring = multi_start_color(&inc, 30, 1).unwrap();
        let a = inc.to_dense() * 1.5;
        let calls = AtomicUsize::new(0);
        let f = |x: &[f64]| {
            calls.fetch_add(1, Ordering::SeqCst);
            Ok((&a * DVector::from_column_slice(x)).iter().copied().collect())
        };
        let x = [1.0; 6];
        let psp = psp_jacobian(&f, &x, &coloring, &inc, &[0.5; 3]).unwrap();
        assert_eq!(calls.swap(0, Ordering::SeqCst), 6);
        let fd = fd_jacobian(&f, &x, &[0.5; 6]).unwrap();
        assert_eq!(calls.load(Ordering::SeqCst), 12);
        assert_eq!((psp.evaluations, fd.evaluations), (6, 12));
        assert_abs_diff_eq!(psp.matrix, a, epsilon = 1e-12);
        assert_abs_diff_eq!(fd.matrix, a, epsilon = 1e-12);
    }

    #[test]
    fn psp_single_color_recovers_diagonal() {
        let inc = IncidenceMatrix::identity(4);
        let coloring = ColorAssignment::new(vec![0; 4]);
        let f = |x: &[f64]| Ok(x.iter().enumerate().map(|(i, v)| (i as f64 + 1.0) * v).collect());
        let j = psp_jacobian(f, &[0.0; 4], &coloring, &inc, &[1.0]).unwrap();
        assert_eq!(j.evaluations, 2);
        assert_eq!(j.matrix, DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0])));
    }

    #[test]
    fn condense_by_hand_on_cyclic_pattern() {
        let inc = cyclic_six();
        let h = DMatrix::from_fn(6, 6, |i, j| if inc.get(i, j) { (10 * i + j) as f64 } else { 0.0 });
        let coloring = ColorAssignment::new(vec![0, 1, 2, 0, 1, 2]);
        let c = condense(&h, &coloring).unwrap();
        #[rustfmt::skip]
        let expected = DMatrix::from_row_slice(6, 3, &[
            0.0, 1.0, 5.0,
            10.0, 11.0, 12.0,
            23.0, 21.0, 22.0,
            33.0, 34.0, 32.0,
            43.0, 44.0, 45.0,
            50.0, 54.0, 55.0,
        ]);
        assert_eq!(c, expected);
        assert_eq!(inflate(&c, &coloring, &inc).unwrap(), h);
    }

    #[test]
    fn identity_coloring_inflate_masks() {
        let inc = IncidenceMatrix::from_rows(vec![vec![0], vec![1]], 2).unwrap();
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let c = ColorAssignment::identity(2);
        assert_eq!(condense(&h, &c).unwrap(), h);
        assert_eq!(inflate(&h, &c, &inc).unwrap(), DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 4.0]));
        assert_eq!(inflate(&DMatrix::zeros(2, 2), &c, &inc).unwrap(), DMatrix::zeros(2, 2));
    }

    #[test]
    fn inflate_rejects_invalid_coloring() {
        let err = inflate(&DMatrix::zeros(6, 1), &ColorAssignment::new(vec![0; 6]), &cyclic_six()).unwrap_err();
        assert!(matches!(err, Error::InvalidColoring { .. }));
    }

    #[test]
    fn incidence_union_over_intervals() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let b = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, -2.0]);
        let inc = detect_incidence([&a, &b], 0.0).unwrap();
        assert_eq!(inc.to_dense(), DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let z = DMatrix::zeros(2, 2);
        assert_eq!(detect_incidence([&z, &z], 0.0).unwrap().nnz(), 0);
    }

    #[test]
    fn cyclic_pattern_from_synthetic_jacobian() {
        let h = DMatrix::from_fn(6, 6, |i, j| if (j + 6 - i) % 6 <= 1 || (i + 6 - j) % 6 == 1 { 0.3 + j as f64 } else { 0.0 });
        assert_eq!(detect_incidence([&h], 0.0).unwrap(), cyclic_six());
    }

    #[test]
    fn theta_pads_before_first_interval() {
        let mut set = JacobianSet::new();
        set.insert(1, 1, DMatrix::from_element(1, 2, 1.0)).unwrap();
        set.insert(1, 0, DMatrix::from_element(1, 2, 2.0)).unwrap();
        let t = set.theta(1, 3, 1, 2).unwrap();
        assert_eq!(t, DMatrix::from_row_slice(1, 6, &[1.0, 1.0, 2.0, 2.0, 0.0, 0.0]));
        assert!(set.theta(2, 1, 1, 2).is_err());
    }

    fn arb_consistent() -> impl Strategy<Value = (DMatrix<f64>, IncidenceMatrix, u64)> {
        (1usize..20, 1usize..20, any::<u64>()).prop_flat_map(|(m, n, seed)| {
            (
                prop::collection::vec(prop::collection::vec(any::<bool>(), n), m),
                prop::collection::vec(-10.0f64..10.0, m * n),
                prop::collection::vec(any::<bool>(), m * n),
            )
                .prop_map(move |(bits, vals, keep)| {
                    let inc = IncidenceMatrix::from_rows(
                        bits.iter().map(|r| r.iter().enumerate().filter(|(_, b)| **b).map(|(j, _)| j).collect()).collect(),
                        n,
                    )
                    .unwrap();
                    let h = DMatrix::from_fn(m, n, |i, j| if inc.get(i, j) && keep[i * n + j] { vals[i * n + j] } else { 0.0 });
                    (h, inc, seed)
                })
        })
    }

    proptest! {
        #[test]
        fn inflate_condense_round_trip((h, inc, seed) in arb_consistent()) {
            let coloring = multi_start_color(&inc, 3, seed).unwrap();
            let back = inflate(&condense(&h, &coloring).unwrap(), &coloring, &inc).unwrap();
            prop_assert_eq!(back, h);
        }

        #[test]
        fn psp_equals_fd_on_linear_maps((a, inc, seed) in arb_consistent(), x0 in -5.0f64..5.0) {
            let coloring = multi_start_color(&inc, 3, seed).unwrap();
            let f = |x: &[f64]| Ok((&a * DVector::from_column_slice(x)).iter().copied().collect());
            let x = vec![x0; a.ncols()];
            let psp = psp_jacobian(f, &x, &coloring, &inc, &vec![0.25; coloring.num_colors()]).unwrap();
            let fd = fd_jacobian(f, &x, &vec![0.25; a.ncols()]).unwrap();
            let err = (&psp.matrix - &fd.matrix).norm() / fd.matrix.norm().max(1e-300);
            prop_assert!(err <= 1e-10 || fd.matrix.norm() == 0.0);
        }
    }
}
